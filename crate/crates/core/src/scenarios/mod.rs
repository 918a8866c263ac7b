//! The adaptive-cruise-control and Dubins-car case studies, plus a policy
//! comparison driver shared by both.

pub mod acc;
pub mod dubins;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filter::{CbfDef, NominalFn, Policy, SwitchingLaw};
use crate::grid::{Grid, GridFn};
use crate::model::HybridAutomaton;
use crate::reach::{synthesize_transition, ReachSettings, TransitionSynthesis};
use crate::sim::{
    check_pairwise_safety, check_global_preconditions, combined_kernels, run_hybrid, HybridTrajectory, SafetyVerdict,
    SimSettings, PreconditionReport,
};

pub use acc::{build_acc, AccParams};
pub use dubins::{build_dubins, DubinsParams};

/// Built-in scenario with its parameters; the tag is the scenario key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "lowercase")]
pub enum ScenarioSpec {
    Acc(AccParams),
    Dubins(DubinsParams),
}

impl ScenarioSpec {
    pub fn key(&self) -> &'static str {
        match self {
            ScenarioSpec::Acc(_) => "acc",
            ScenarioSpec::Dubins(_) => "dubins",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "acc" => Some(ScenarioSpec::Acc(AccParams::default())),
            "dubins" => Some(ScenarioSpec::Dubins(DubinsParams::default())),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        match self {
            ScenarioSpec::Acc(p) => {
                let a = build_acc(p.clone())?;
                Ok(Scenario {
                    key: "acc",
                    grid: p.grid()?,
                    x0: p.x0.to_vec(),
                    q0: acc::DRY,
                    automaton: a.automaton,
                    local: a.local,
                    global: Some(a.global),
                    nominal: a.nominal,
                    gamma: p.gamma,
                    certify_gamma: p.certify_gamma,
                    spec: self.clone(),
                })
            }
            ScenarioSpec::Dubins(p) => {
                let d = build_dubins(p.clone())?;
                Ok(Scenario {
                    key: "dubins",
                    grid: p.grid()?,
                    x0: p.x0.to_vec(),
                    q0: dubins::DRY,
                    automaton: d.automaton,
                    local: d.local,
                    global: None,
                    nominal: d.nominal,
                    gamma: p.gamma,
                    certify_gamma: p.certify_gamma,
                    spec: self.clone(),
                })
            }
        }
    }

    pub fn default_reach(&self) -> ReachSettings {
        match self {
            ScenarioSpec::Acc(_) => AccParams::default_reach(),
            ScenarioSpec::Dubins(_) => DubinsParams::default_reach(),
        }
    }

    pub fn default_sim(&self) -> SimSettings {
        match self {
            ScenarioSpec::Acc(_) => acc::default_sim(),
            ScenarioSpec::Dubins(_) => dubins::default_sim(),
        }
    }
}

/// A built scenario ready for synthesis and simulation.
#[derive(Clone)]
pub struct Scenario {
    pub key: &'static str,
    pub spec: ScenarioSpec,
    pub automaton: Arc<HybridAutomaton>,
    pub local: Vec<CbfDef>,
    /// A CBF valid in every mode, if the scenario has one.
    pub global: Option<CbfDef>,
    pub nominal: NominalFn,
    pub grid: Grid,
    pub x0: Vec<f64>,
    pub q0: usize,
    /// CBF coefficient used by the online filter.
    pub gamma: f64,
    /// Class-K coefficient of the refined CBFs for the input-set check.
    pub certify_gamma: f64,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("key", &self.key)
            .field("x0", &self.x0)
            .field("q0", &self.q0)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    /// Synthesizes every transition of the automaton on the scenario grid.
    pub fn synthesize(&self, settings: &ReachSettings) -> Result<BTreeMap<(usize, usize), TransitionSynthesis>> {
        self.automaton
            .transitions()
            .into_iter()
            .map(|(from, to)| {
                let s = synthesize_transition(
                    &self.automaton,
                    from,
                    to,
                    &self.local[from].as_set(),
                    &self.local[to].as_set(),
                    &self.grid,
                    settings,
                )?;
                Ok(((from, to), s))
            })
            .collect()
    }

    /// Switching law for `policy`, or `None` when the policy does not apply.
    pub fn switching_law(&self, refined: &BTreeMap<(usize, usize), GridFn>, policy: Policy) -> Option<SwitchingLaw> {
        if policy == Policy::GlobalCbf && self.global.is_none() {
            return None;
        }
        let refined_cbfs = refined
            .iter()
            .map(|(&(from, to), v)| {
                let name = format!(
                    "h_{}_{}",
                    self.automaton.mode(from).name,
                    self.automaton.mode(to).name
                );
                ((from, to), CbfDef::gridded(name, self.gamma, v.clone()))
            })
            .collect();
        Some(
            SwitchingLaw::new(self.automaton.clone(), self.local.clone(), self.nominal.clone(), policy)
                .with_refined(refined_cbfs)
                .with_global(self.global.clone()),
        )
    }

    /// Checks the global-safety preconditions for the kernels built from
    /// `refined`, with the scenario's initial state.
    pub fn check_preconditions(&self, refined: &BTreeMap<(usize, usize), GridFn>) -> Result<PreconditionReport> {
        self.check_preconditions_on(&self.automaton, refined)
    }

    /// As [`Scenario::check_preconditions`] with a different automaton, e.g. one with
    /// altered control boxes.
    pub fn check_preconditions_on(
        &self,
        automaton: &HybridAutomaton,
        refined: &BTreeMap<(usize, usize), GridFn>,
    ) -> Result<PreconditionReport> {
        let kernels = combined_kernels(automaton, &self.local, refined, &self.grid)?;
        let gammas = vec![self.certify_gamma; kernels.len()];
        check_global_preconditions(automaton, &kernels, &gammas, &[(self.q0, self.x0.clone())])
    }

    /// Progress and safety metrics of a trajectory.
    pub fn metrics(&self, traj: &HybridTrajectory) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let min_h = traj
            .segments
            .iter()
            .flat_map(|s| s.x.iter().map(move |x| self.local[s.mode].value(x)))
            .fold(f64::INFINITY, f64::min);
        out.insert("min_h".into(), min_h);
        match &self.spec {
            ScenarioSpec::Acc(p) => {
                let final_p = traj.final_state().map_or(f64::NAN, |(_, x)| x[0]);
                out.insert("position_at_horizon".into(), final_p);
                let headway = traj.samples().map(|(_, _, x, _, _)| p.headway(x)).fold(f64::INFINITY, f64::min);
                out.insert("min_headway".into(), headway);
                let post = traj
                    .segments
                    .iter()
                    .skip(1)
                    .flat_map(|s| s.x.iter().map(|x| p.cbf_value(p.c_ice, x)))
                    .fold(f64::INFINITY, f64::min);
                out.insert("min_h_ice_after_switch".into(), post);
            }
            ScenarioSpec::Dubins(p) => {
                let mut length = 0.0;
                let mut prev: Option<&[f64]> = None;
                let mut clearance = f64::INFINITY;
                for (_, _, x, _, _) in traj.samples() {
                    if let Some(q) = prev {
                        length += (x[0] - q[0]).hypot(x[1] - q[1]);
                    }
                    prev = Some(x);
                    clearance = clearance.min(p.clearance(x[0], x[1]));
                }
                let goal = traj
                    .final_state()
                    .map_or(f64::NAN, |(_, x)| (x[0] - p.goal[0]).hypot(x[1] - p.goal[1]));
                out.insert("path_length".into(), length);
                out.insert("goal_distance".into(), goal);
                out.insert("min_clearance".into(), clearance);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum PolicyOutcome {
    NotApplicable(String),
    Ran {
        trajectory: HybridTrajectory,
        verdict: SafetyVerdict,
        metrics: BTreeMap<String, f64>,
    },
}

#[derive(Clone, Debug)]
pub struct PolicyRun {
    pub policy: Policy,
    pub outcome: PolicyOutcome,
}

impl PolicyRun {
    pub fn ran(&self) -> Option<(&HybridTrajectory, &SafetyVerdict, &BTreeMap<String, f64>)> {
        match &self.outcome {
            PolicyOutcome::Ran {
                trajectory,
                verdict,
                metrics,
            } => Some((trajectory, verdict, metrics)),
            PolicyOutcome::NotApplicable(_) => None,
        }
    }
}

/// Simulates each policy from the scenario's initial condition.
pub fn run_comparison(
    scenario: &Scenario,
    refined: &BTreeMap<(usize, usize), GridFn>,
    policies: &[Policy],
    sim: &SimSettings,
) -> Result<Vec<PolicyRun>> {
    policies
        .par_iter()
        .map(|&policy| {
            let Some(law) = scenario.switching_law(refined, policy) else {
                return Ok(PolicyRun {
                    policy,
                    outcome: PolicyOutcome::NotApplicable(
                        "modes have different safe sets; no single CBF covers them".into(),
                    ),
                });
            };
            let trajectory = run_hybrid(&scenario.automaton, &law, &scenario.x0, scenario.q0, sim)?;
            let verdict = check_pairwise_safety(&trajectory, &scenario.local)?;
            let metrics = scenario.metrics(&trajectory);
            Ok(PolicyRun {
                policy,
                outcome: PolicyOutcome::Ran {
                    trajectory,
                    verdict,
                    metrics,
                },
            })
        })
        .collect()
}
