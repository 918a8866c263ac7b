//! Closed-loop simulation of hybrid automata and safety monitoring.
//!
//! Flows are integrated with fixed-step RK4, holding the control constant over
//! each step. Guard entry is detected by a sign change of the guard level and
//! localised by bisecting the step length. Transitions are urgent and carry
//! the continuous state over unchanged.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::{build_constraint, filter_qp, CbfDef, HalfspaceConstraint, SwitchingLaw};
use crate::grid::{Grid, GridFn};
use crate::model::{HybridAutomaton, ModeDef};

pub const EVENT_TOL: f64 = 1e-9;
pub const MAX_BISECTIONS: usize = 60;
pub const MAX_SWITCHES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SimSettings {
    pub dt: f64,
    pub horizon: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 25.0,
        }
    }
}

/// Control applied from one sample to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSample {
    pub u: Vec<f64>,
    /// Value of the CBF(s) enforced at the sample; NaN when none.
    pub h_active: f64,
    pub feasible: bool,
}

pub trait Controller {
    fn control(&self, q: usize, t: f64, x: &[f64]) -> Result<ControlSample>;
}

impl Controller for SwitchingLaw {
    fn control(&self, q: usize, t: f64, x: &[f64]) -> Result<ControlSample> {
        let d = SwitchingLaw::control(self, q, t, x)?;
        Ok(ControlSample {
            u: d.filter.u,
            h_active: d.h_active,
            feasible: d.filter.feasible,
        })
    }
}

/// Unfiltered feedback `(q, t, x) ↦ u`.
pub struct OpenLoop<F>(pub F);

impl<F: Fn(usize, f64, &[f64]) -> Vec<f64>> Controller for OpenLoop<F> {
    fn control(&self, q: usize, t: f64, x: &[f64]) -> Result<ControlSample> {
        Ok(ControlSample {
            u: (self.0)(q, t, x),
            h_active: f64::NAN,
            feasible: true,
        })
    }
}

/// One flow segment `(q_i, φ_i, δ_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub mode: usize,
    /// Switch-in time `τ_i`.
    pub tau: f64,
    /// Dwell `δ_i`; for the last segment the time until the run stopped.
    pub dwell: f64,
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Applied (box-clamped) input at each sample.
    pub u: Vec<Vec<f64>>,
    pub h_active: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TerminalReason {
    HorizonReached,
    /// A guard level crossed zero but no guard predicate holds at the
    /// localised crossing point.
    NoSuccessor { t: f64, state: Vec<f64> },
    DomainExit { t: f64, state: Vec<f64> },
    /// The controller failed; the message names the cause.
    SafetyFault { t: f64, message: String },
    IntegrationFault { t: f64 },
    Zeno { switches: usize },
}

impl TerminalReason {
    pub fn is_fault(&self) -> bool {
        !matches!(self, TerminalReason::HorizonReached)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridTrajectory {
    pub mode_names: Vec<String>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub segments: Vec<Segment>,
    pub terminal: TerminalReason,
    /// Samples at which the filter QP was infeasible.
    pub infeasible_samples: usize,
}

/// A mode jump between consecutive segments.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub from: usize,
    pub to: usize,
    pub state: Vec<f64>,
}

impl HybridTrajectory {
    pub fn switches(&self) -> Vec<SwitchEvent> {
        self.segments
            .windows(2)
            .map(|w| SwitchEvent {
                t: w[1].tau,
                from: w[0].mode,
                to: w[1].mode,
                state: w[1].x[0].clone(),
            })
            .collect()
    }

    pub fn final_state(&self) -> Option<(f64, &[f64])> {
        let s = self.segments.last()?;
        Some((*s.t.last()?, s.x.last()?.as_slice()))
    }

    /// Iterates `(mode, t, x, u, h_active)` over all samples, switch samples twice.
    pub fn samples(&self) -> impl Iterator<Item = (usize, f64, &[f64], &[f64], f64)> + '_ {
        self.segments.iter().flat_map(|s| {
            (0..s.t.len()).map(move |k| (s.mode, s.t[k], s.x[k].as_slice(), s.u[k].as_slice(), s.h_active[k]))
        })
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string(), "mode".to_string()];
        cols.extend((0..self.state_dim).map(|i| format!("x{i}")));
        cols.extend((0..self.input_dim).map(|j| format!("u{j}")));
        cols.push("h_active".into());
        cols.join(",")
    }

    /// `t,mode,x0..,u0..,h_active`, one row per sample; numbers use the
    /// shortest round-trip representation so reruns are byte-identical.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for (q, t, x, u, h) in self.samples() {
            write!(w, "{t},{}", self.mode_names[q])?;
            for v in x.iter().chain(u) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{h}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

fn rk4_step(
    automaton: &HybridAutomaton,
    q: usize,
    x: &[f64],
    u: &[f64],
    h: f64,
    out: &mut [f64],
) -> Result<()> {
    let n = x.len();
    let mut g = vec![0.0; n * automaton.input_dim()];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    automaton.eval_flow_into(q, x, u, &mut k1, &mut g)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    automaton.eval_flow_into(q, &tmp, u, &mut k2, &mut g)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    automaton.eval_flow_into(q, &tmp, u, &mut k3, &mut g)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    automaton.eval_flow_into(q, &tmp, u, &mut k4, &mut g)?;
    for i in 0..n {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dynamics {
            mode: automaton.mode(q).name.clone(),
            state: x.to_vec(),
        });
    }
    Ok(())
}

/// How a segment ended.
#[derive(Clone, Debug, PartialEq)]
pub enum SegmentExit {
    Guard { to: usize, t: f64, state: Vec<f64> },
    Horizon,
    NoSuccessor { t: f64, state: Vec<f64> },
    DomainExit { t: f64, state: Vec<f64> },
    SafetyFault { t: f64, message: String },
    IntegrationFault { t: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRun {
    pub segment: Segment,
    pub exit: SegmentExit,
    pub infeasible_samples: usize,
}

fn clamp_into_box(automaton: &HybridAutomaton, q: usize, mut u: Vec<f64>) -> Vec<f64> {
    automaton.mode(q).control_box.clamp(&mut u);
    u
}

/// Smallest `τ ∈ (0, h]` with `level(x(τ)) ≥ 0`, localised to `|level| ≤ EVENT_TOL`
/// or `MAX_BISECTIONS` halvings. Returns the crossing sub-step and state.
fn localise(
    automaton: &HybridAutomaton,
    q: usize,
    x: &[f64],
    u: &[f64],
    h: f64,
    x_end: &[f64],
    level: &dyn Fn(&[f64]) -> f64,
) -> Result<(f64, Vec<f64>)> {
    let mut lo = 0.0;
    let mut hi = h;
    let mut x_hi = x_end.to_vec();
    let mut probe = vec![0.0; x.len()];
    for _ in 0..MAX_BISECTIONS {
        if level(&x_hi).abs() <= EVENT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        rk4_step(automaton, q, x, u, mid, &mut probe)?;
        if level(&probe) >= 0.0 {
            hi = mid;
            x_hi.copy_from_slice(&probe);
        } else {
            lo = mid;
        }
    }
    Ok((hi, x_hi))
}

/// Integrates mode `q` from `(t0, x0)` until a guard fires or `t_max`.
///
/// Guards are checked from the end of the first step on (minimum dwell of
/// one step). Among guards whose level turns nonnegative within a step, the
/// one with the earliest localised crossing fires.
pub fn integrate_segment(
    automaton: &HybridAutomaton,
    q: usize,
    controller: &dyn Controller,
    x0: &[f64],
    t0: f64,
    t_max: f64,
    dt: f64,
) -> Result<SegmentRun> {
    if !(dt > 0.0) {
        return Err(Error::Settings(format!("dt must be positive, got {dt}")));
    }
    let mode = automaton.mode(q);
    let n = automaton.state_dim();
    let guards: Vec<(usize, &crate::model::GuardDef)> = automaton.outgoing(q).collect();

    let mut seg = Segment {
        mode: q,
        tau: t0,
        dwell: 0.0,
        t: Vec::new(),
        x: Vec::new(),
        u: Vec::new(),
        h_active: Vec::new(),
    };
    let mut infeasible = 0;
    let mut push = |seg: &mut Segment, t: f64, x: &[f64]| -> Result<std::result::Result<Vec<f64>, String>> {
        match controller.control(q, t, x) {
            Ok(c) => {
                if !c.feasible {
                    infeasible += 1;
                }
                let u = clamp_into_box(automaton, q, c.u);
                seg.t.push(t);
                seg.x.push(x.to_vec());
                seg.u.push(u.clone());
                seg.h_active.push(c.h_active);
                Ok(Ok(u))
            }
            Err(e @ Error::Determinism { .. }) => Err(e),
            Err(e) => Ok(Err(e.to_string())),
        }
    };
    let finish = |mut seg: Segment, exit: SegmentExit, infeasible: usize| {
        seg.dwell = seg.t.last().copied().unwrap_or(t0) - t0;
        SegmentRun {
            segment: seg,
            exit,
            infeasible_samples: infeasible,
        }
    };

    let steps = (((t_max - t0) / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut x = x0.to_vec();
    let mut x_next = vec![0.0; n];
    let mut levels: Vec<f64> = guards.iter().map(|(_, g)| g.level(&x)).collect();
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let u = match push(&mut seg, t, &x)? {
            Ok(u) => u,
            Err(message) => return Ok(finish(seg, SegmentExit::SafetyFault { t, message }, infeasible)),
        };
        let t_next = if k + 1 == steps { t_max } else { t0 + (k + 1) as f64 * dt };
        let h = t_next - t;
        if rk4_step(automaton, q, &x, &u, h, &mut x_next).is_err() {
            return Ok(finish(seg, SegmentExit::IntegrationFault { t }, infeasible));
        }

        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for (j, (to, guard)) in guards.iter().enumerate() {
            let lv = guard.level(&x_next);
            if lv < 0.0 {
                levels[j] = lv;
                continue;
            }
            let (tau, xs) = if levels[j] < 0.0 {
                localise(automaton, q, &x, &u, h, &x_next, &|s| guard.level(s))?
            } else {
                // already inside at segment start; fires once the dwell step is done
                (h, x_next.clone())
            };
            levels[j] = lv;
            if best.as_ref().is_none_or(|(bt, _, _)| tau < *bt) {
                best = Some((tau, *to, xs));
            }
        }
        if let Some((tau, _, xs)) = best {
            let t_hit = t + tau;
            let holding: Vec<usize> = guards
                .iter()
                .filter(|(_, g)| g.contains(&xs))
                .map(|(to, _)| *to)
                .collect();
            // pre-switch sample, recorded with the control held over the step
            seg.t.push(t_hit);
            seg.x.push(xs.clone());
            seg.u.push(u.clone());
            seg.h_active.push(*seg.h_active.last().unwrap_or(&f64::NAN));
            return match holding.as_slice() {
                [to] => Ok(finish(seg, SegmentExit::Guard { to: *to, t: t_hit, state: xs }, infeasible)),
                [] => Ok(finish(seg, SegmentExit::NoSuccessor { t: t_hit, state: xs }, infeasible)),
                many => Err(Error::Determinism {
                    mode: mode.name.clone(),
                    candidates: many.iter().map(|to| automaton.mode(*to).name.clone()).collect(),
                    state: xs,
                }),
            };
        }

        std::mem::swap(&mut x, &mut x_next);
        if !mode.domain.contains(&x) {
            let _ = push(&mut seg, t_next, &x)?;
            return Ok(finish(seg, SegmentExit::DomainExit { t: t_next, state: x }, infeasible));
        }
    }
    let t_end = if steps == 0 { t0 } else { t_max };
    match push(&mut seg, t_end, &x)? {
        Ok(_) => Ok(finish(seg, SegmentExit::Horizon, infeasible)),
        Err(message) => Ok(finish(seg, SegmentExit::SafetyFault { t: t_end, message }, infeasible)),
    }
}

/// Chains flow segments across guard jumps until `horizon` or a fault.
pub fn run_hybrid(
    automaton: &HybridAutomaton,
    controller: &dyn Controller,
    x0: &[f64],
    q0: usize,
    settings: &SimSettings,
) -> Result<HybridTrajectory> {
    if q0 >= automaton.modes().len() {
        return Err(Error::Config(format!("initial mode {q0} does not exist")));
    }
    if x0.len() != automaton.state_dim() {
        return Err(Error::Config(format!(
            "initial state has {} entries, expected {}",
            x0.len(),
            automaton.state_dim()
        )));
    }
    if !automaton.mode(q0).domain.contains(x0) {
        return Err(Error::Config(format!(
            "initial state {x0:?} outside the domain of mode {}",
            automaton.mode(q0).name
        )));
    }
    if !(settings.dt > 0.0 && settings.horizon >= 0.0) {
        return Err(Error::Settings(format!("bad simulation settings {settings:?}")));
    }
    let mut traj = HybridTrajectory {
        mode_names: automaton.modes().iter().map(|m| m.name.clone()).collect(),
        state_dim: automaton.state_dim(),
        input_dim: automaton.input_dim(),
        segments: Vec::new(),
        terminal: TerminalReason::HorizonReached,
        infeasible_samples: 0,
    };
    let (mut q, mut t, mut x) = (q0, 0.0, x0.to_vec());
    loop {
        let run = integrate_segment(automaton, q, controller, &x, t, settings.horizon, settings.dt)?;
        traj.infeasible_samples += run.infeasible_samples;
        traj.segments.push(run.segment);
        match run.exit {
            SegmentExit::Guard { to, t: t_hit, state } => {
                if traj.segments.len() > MAX_SWITCHES {
                    traj.terminal = TerminalReason::Zeno {
                        switches: traj.segments.len() - 1,
                    };
                    return Ok(traj);
                }
                log::debug!(
                    "switch {} -> {} at t = {t_hit}",
                    automaton.mode(q).name,
                    automaton.mode(to).name
                );
                q = to;
                t = t_hit;
                x = state;
            }
            SegmentExit::Horizon => return Ok(traj),
            SegmentExit::NoSuccessor { t, state } => {
                traj.terminal = TerminalReason::NoSuccessor { t, state };
                return Ok(traj);
            }
            SegmentExit::DomainExit { t, state } => {
                traj.terminal = TerminalReason::DomainExit { t, state };
                return Ok(traj);
            }
            SegmentExit::SafetyFault { t, message } => {
                traj.terminal = TerminalReason::SafetyFault { t, message };
                return Ok(traj);
            }
            SegmentExit::IntegrationFault { t } => {
                traj.terminal = TerminalReason::IntegrationFault { t };
                return Ok(traj);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentSafety {
    pub mode: String,
    pub min_h: f64,
    pub t_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub t: f64,
    pub mode: String,
    pub state: Vec<f64>,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchMembership {
    /// In `S_{q,q'}`: the successor's safe set holds at the switch.
    Safe,
    /// In `U_{q,q'}`.
    Unsafe,
    /// Outside `C_q` already, so in neither set.
    Neither,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchCheck {
    pub t: f64,
    pub from: String,
    pub to: String,
    pub state: Vec<f64>,
    /// `h_from` and `h_to` at the switch state.
    pub h_from: f64,
    pub h_to: f64,
    pub membership: SwitchMembership,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    pub segments: Vec<SegmentSafety>,
    pub first_violation: Option<Violation>,
    pub switch_states: Vec<SwitchCheck>,
}

/// Evaluates each segment's local CBF `cbfs[mode]` at every sample.
pub fn check_pairwise_safety(traj: &HybridTrajectory, cbfs: &[CbfDef]) -> Result<SafetyVerdict> {
    let name = |q: usize| traj.mode_names[q].clone();
    let cbf = |q: usize| {
        cbfs.get(q)
            .ok_or_else(|| Error::Config(format!("no CBF for mode {}", name(q))))
    };
    let mut segments = Vec::new();
    let mut first_violation = None;
    for seg in &traj.segments {
        let h = cbf(seg.mode)?;
        let tol = h.violation_tol();
        let mut min_h = f64::INFINITY;
        let mut t_min = seg.tau;
        for (t, x) in seg.t.iter().zip(&seg.x) {
            let v = h.value(x);
            if v < min_h {
                min_h = v;
                t_min = *t;
            }
            if v < -tol && first_violation.is_none() {
                first_violation = Some(Violation {
                    t: *t,
                    mode: name(seg.mode),
                    state: x.clone(),
                    h: v,
                });
            }
        }
        segments.push(SegmentSafety {
            mode: name(seg.mode),
            min_h,
            t_min,
        });
    }
    let mut switch_states = Vec::new();
    for s in traj.switches() {
        let h_from = cbf(s.from)?.value(&s.state);
        let h_to = cbf(s.to)?.value(&s.state);
        let membership = if h_from < 0.0 {
            SwitchMembership::Neither
        } else if h_to >= 0.0 {
            SwitchMembership::Safe
        } else {
            SwitchMembership::Unsafe
        };
        switch_states.push(SwitchCheck {
            t: s.t,
            from: name(s.from),
            to: name(s.to),
            state: s.state,
            h_from,
            h_to,
            membership,
        });
    }
    Ok(SafetyVerdict {
        safe: first_violation.is_none(),
        segments,
        first_violation,
        switch_states,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub mode: String,
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub assumption: usize,
    pub passed: bool,
    pub detail: String,
    pub witness: Option<Witness>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreconditionReport {
    pub assumptions: Vec<AssumptionCheck>,
}

impl PreconditionReport {
    pub fn all_passed(&self) -> bool {
        self.assumptions.iter().all(|a| a.passed)
    }
}

impl std::fmt::Display for PreconditionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for a in &self.assumptions {
            write!(
                f,
                "assumption {}: {} ({})",
                a.assumption,
                if a.passed { "pass" } else { "FAIL" },
                a.detail
            )?;
            if let Some(w) = &a.witness {
                write!(f, " witness mode {} at {:?}", w.mode, w.state)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Builds `C*_q` on `grid`: the node-wise min of the refined CBFs of all
/// outgoing transitions of `q`, or the sampled local CBF when `q` has none.
pub fn combined_kernels(
    automaton: &HybridAutomaton,
    local: &[CbfDef],
    refined: &BTreeMap<(usize, usize), GridFn>,
    grid: &Grid,
) -> Result<Vec<GridFn>> {
    (0..automaton.modes().len())
        .map(|q| {
            let mut acc: Option<GridFn> = None;
            for (to, _) in automaton.outgoing(q) {
                let r = refined.get(&(q, to)).ok_or_else(|| {
                    Error::Config(format!(
                        "missing refined CBF for {} -> {}",
                        automaton.mode(q).name,
                        automaton.mode(to).name
                    ))
                })?;
                acc = Some(match acc {
                    None => r.clone(),
                    Some(a) => a.min(r)?,
                });
            }
            match acc {
                Some(a) => Ok(a),
                None => local
                    .get(q)
                    .ok_or_else(|| Error::Config(format!("no local CBF for mode {q}")))?
                    .as_set()
                    .sample(grid),
            }
        })
        .collect()
}

/// Checks the sufficient conditions for global safety under any switching
/// controller built from the kernels `C*_q`:
///
/// 1. every initial state lies in `C*_{q0}`;
/// 2. per transition, `C*_q ∩ C*_q' ∩ Guard` is nonempty or `C*_q ∩ Guard` is empty;
/// 3. at every node of `C*_q` the CBF input set of `C*_q` (coefficient
///    `gammas[q]`) is nonempty. Nodes where the central-difference constraint
///    is infeasible are retried with one-sided differences, since `C*_q` is
///    piecewise multilinear and its kinks sit on nodes.
pub fn check_global_preconditions(
    automaton: &HybridAutomaton,
    kernels: &[GridFn],
    gammas: &[f64],
    initial: &[(usize, Vec<f64>)],
) -> Result<PreconditionReport> {
    let name = |q: usize| automaton.mode(q).name.clone();
    let mut out = Vec::new();

    let bad_init = initial
        .iter()
        .find(|(q, x)| kernels[*q].interpolate(x) < 0.0);
    out.push(AssumptionCheck {
        assumption: 1,
        passed: bad_init.is_none() && kernels.iter().all(|k| k.max_value() >= 0.0),
        detail: format!("{} initial state(s) sampled", initial.len()),
        witness: bad_init.map(|(q, x)| Witness {
            mode: name(*q),
            state: x.clone(),
        }),
    });

    let mut a2 = AssumptionCheck {
        assumption: 2,
        passed: true,
        detail: String::new(),
        witness: None,
    };
    let mut notes = Vec::new();
    for (from, to) in automaton.transitions() {
        let guard = automaton.guard(from, to).expect("listed transition");
        let grid = kernels[from].grid();
        let (kf, kt) = (kernels[from].values(), kernels[to].values());
        let mut both = false;
        let mut reach = None;
        for k in 0..grid.len() {
            let x = grid.node_vec(k);
            if kf[k] >= 0.0 && guard.contains(&x) {
                reach.get_or_insert(x);
                if kt[k] >= 0.0 {
                    both = true;
                    break;
                }
            }
        }
        let ok = both || reach.is_none();
        notes.push(format!(
            "{}->{}: {}",
            name(from),
            name(to),
            if both {
                "safe switching states exist"
            } else if ok {
                "kernel misses the guard"
            } else {
                "kernel meets the guard only outside the successor kernel"
            }
        ));
        if !ok && a2.passed {
            a2.passed = false;
            a2.witness = reach.map(|state| Witness { mode: name(from), state });
        }
    }
    a2.detail = if notes.is_empty() { "no transitions".into() } else { notes.join("; ") };
    out.push(a2);

    let mut a3 = AssumptionCheck {
        assumption: 3,
        passed: true,
        detail: String::new(),
        witness: None,
    };
    let mut checked = 0;
    let mut failed = 0;
    let kinks = AtomicUsize::new(0);
    for (q, kernel) in kernels.iter().enumerate() {
        let mode = automaton.mode(q);
        let gamma = gammas[q];
        let cbf = CbfDef::gridded(format!("C*_{}", mode.name), gamma, kernel.clone());
        let grid = kernel.grid();
        let center = mode.control_box.center();
        let vals = kernel.values();
        let nodes: Vec<usize> = (0..grid.len()).filter(|k| vals[*k] >= 0.0).collect();
        checked += nodes.len();
        let bad: Vec<usize> = nodes
            .par_iter()
            .filter_map(|&k| {
                let x = grid.node_vec(k);
                let central = match build_constraint(&cbf, mode, &x) {
                    Ok(c) => filter_qp(&center, &[c], &mode.control_box).feasible,
                    Err(_) => return Some(k),
                };
                if central {
                    return None;
                }
                kinks.fetch_add(1, Ordering::Relaxed);
                (!one_sided_feasible(kernel, mode, &x, gamma, &center)).then_some(k)
            })
            .collect();
        failed += bad.len();
        if let (Some(&k), true) = (bad.iter().min(), a3.passed) {
            a3.passed = false;
            a3.witness = Some(Witness {
                mode: mode.name.clone(),
                state: grid.node_vec(k),
            });
        }
    }
    a3.detail = format!(
        "{checked} kernel nodes solved, {} retried with one-sided differences, {failed} infeasible",
        kinks.load(Ordering::Relaxed)
    );
    out.push(a3);

    Ok(PreconditionReport { assumptions: out })
}

/// Fallback for nodes where the central difference straddles a kink of the
/// interpolated kernel: looks for a control whose one-sided directional
/// derivative satisfies the CBF condition. Each sign pattern fixes which side
/// of the node the flow leaves on, which makes the derivative linear in `u`.
fn one_sided_feasible(kernel: &GridFn, mode: &ModeDef, x: &[f64], gamma: f64, center: &[f64]) -> bool {
    let grid = kernel.grid();
    let n = x.len();
    let m = mode.control_box.dim();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    (mode.drift)(x, &mut f);
    (mode.input_matrix)(x, &mut g);
    let value = kernel.interpolate(x);
    let mut probe = x.to_vec();
    let mut diff = |i: usize, dx: f64| {
        probe[i] = x[i] + dx;
        let v = kernel.interpolate(&probe);
        probe[i] = x[i];
        (v - value) / dx
    };
    let sides: Vec<[f64; 2]> = grid
        .axes()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let h = a.spacing();
            let fwd = (a.periodic || x[i] + h <= a.upper).then(|| diff(i, h));
            let bwd = (a.periodic || x[i] - h >= a.lower).then(|| diff(i, -h));
            let (fwd, bwd) = (fwd.or(bwd).unwrap_or(0.0), bwd.or(fwd).unwrap_or(0.0));
            [bwd, fwd]
        })
        .collect();
    'pattern: for pattern in 0..(1usize << n) {
        let mut rows = Vec::with_capacity(n + 1);
        let mut main = HalfspaceConstraint { a: vec![0.0; m], b: -gamma * value };
        for i in 0..n {
            let up = pattern >> i & 1 == 1;
            let s = if up { 1.0 } else { -1.0 };
            let d = sides[i][up as usize];
            let row = &g[i * m..(i + 1) * m];
            if row.iter().all(|v| *v == 0.0) {
                if s * f[i] < 0.0 {
                    continue 'pattern;
                }
            } else {
                rows.push(HalfspaceConstraint {
                    a: row.iter().map(|v| s * v).collect(),
                    b: -s * f[i],
                });
            }
            main.b -= d * f[i];
            for (a, v) in main.a.iter_mut().zip(row) {
                *a += d * v;
            }
        }
        rows.push(main);
        if filter_qp(center, &rows, &mode.control_box).feasible {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::Policy;
    use crate::model::{BoxSet, GuardDef, ModeDef};
    use std::sync::Arc;

    fn line(guards: &[f64]) -> HybridAutomaton {
        let mut h = HybridAutomaton::new(1, 1);
        let mode = |name: &str| ModeDef {
            name: name.into(),
            drift: Arc::new(|_x, out| out[0] = 1.0),
            input_matrix: Arc::new(|_x, out| out[0] = 0.0),
            control_box: BoxSet::symmetric(&[1.0]),
            domain: BoxSet::new(vec![-10.0], vec![10.0]),
        };
        h.add_mode(mode("a"));
        for (i, g) in guards.iter().enumerate() {
            let to = h.add_mode(mode(&format!("b{i}")));
            let g = *g;
            h.add_guard(0, to, GuardDef::from_level(move |x| x[0] - g));
        }
        h
    }

    fn zero() -> OpenLoop<impl Fn(usize, f64, &[f64]) -> Vec<f64>> {
        OpenLoop(|_q, _t, _x: &[f64]| vec![0.0])
    }

    #[test]
    fn linear_flow_hits_guard_at_one() {
        let h = line(&[1.0]);
        let run = integrate_segment(&h, 0, &zero(), &[0.0], 0.0, 5.0, 1e-3).unwrap();
        let SegmentExit::Guard { to, t, state } = run.exit else {
            panic!("no guard hit: {:?}", run.exit)
        };
        assert_eq!(to, 1);
        assert!((t - 1.0).abs() <= 1e-6, "t* = {t}");
        assert!(state[0] >= 1.0 && state[0] - 1.0 <= 1e-9);
    }

    #[test]
    fn horizon_sample_count() {
        let h = line(&[]);
        let run = integrate_segment(&h, 0, &zero(), &[0.0], 0.0, 2.0, 1e-3).unwrap();
        assert_eq!(run.exit, SegmentExit::Horizon);
        assert_eq!(run.segment.t.len(), 2001);
        assert_eq!(*run.segment.t.last().unwrap(), 2.0);
        let run = integrate_segment(&h, 0, &zero(), &[0.0], 0.0, 2.0, 0.3).unwrap();
        assert_eq!(run.segment.t.len(), 8);
        assert_eq!(*run.segment.t.last().unwrap(), 2.0);
    }

    #[test]
    fn earlier_of_two_guards_in_one_step_fires() {
        let h = line(&[1.0004, 1.0]);
        let run = integrate_segment(&h, 0, &zero(), &[0.0], 0.0, 5.0, 1e-3).unwrap();
        let SegmentExit::Guard { to, t, .. } = run.exit else { panic!() };
        assert_eq!(h.mode(to).name, "b1");
        assert!((t - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn overlapping_guards_are_ambiguous() {
        let h = line(&[1.0, 0.99]);
        let err = run_hybrid(&h, &zero(), &[0.995], 0, &SimSettings { dt: 1e-2, horizon: 2.0 });
        assert!(matches!(err, Err(Error::Determinism { .. })), "{err:?}");
    }

    #[test]
    fn state_is_continuous_across_jumps() {
        let h = line(&[1.0]);
        let traj = run_hybrid(&h, &zero(), &[0.0], 0, &SimSettings { dt: 1e-2, horizon: 3.0 }).unwrap();
        assert_eq!(traj.segments.len(), 2);
        let (a, b) = (&traj.segments[0], &traj.segments[1]);
        assert_eq!(a.x.last(), b.x.first());
        assert_eq!(a.t.last(), b.t.first());
        assert_eq!(b.tau, a.tau + a.dwell);
        assert!(h.guard(0, 1).unwrap().contains(a.x.last().unwrap()));
        assert_eq!(traj.terminal, TerminalReason::HorizonReached);
        assert_eq!(*b.t.last().unwrap(), 3.0);
    }

    #[test]
    fn short_horizon_gives_one_segment() {
        let h = line(&[1.0]);
        let traj = run_hybrid(&h, &zero(), &[0.0], 0, &SimSettings { dt: 1e-2, horizon: 0.5 }).unwrap();
        assert_eq!(traj.segments.len(), 1);
        assert!(traj.switches().is_empty());
    }

    #[test]
    fn domain_exit_stops_the_run() {
        let h = line(&[]);
        let traj = run_hybrid(&h, &zero(), &[9.5], 0, &SimSettings { dt: 1e-2, horizon: 5.0 }).unwrap();
        let TerminalReason::DomainExit { t, state } = traj.terminal else { panic!() };
        assert!(state[0] > 10.0 && t < 0.52);
    }

    /// `ẋ = u` with `u = 2 − x` held per step crosses `x = 1` at `ln 2` in
    /// continuous time; the hold makes the crossing time first-order in dt.
    fn held_feedback_crossing(dt: f64) -> f64 {
        let mut h = HybridAutomaton::new(1, 1);
        let mode = |name: &str| ModeDef {
            name: name.into(),
            drift: Arc::new(|_x, out| out[0] = 0.0),
            input_matrix: Arc::new(|_x, out| out[0] = 1.0),
            control_box: BoxSet::symmetric(&[5.0]),
            domain: BoxSet::new(vec![-10.0], vec![10.0]),
        };
        h.add_mode(mode("a"));
        h.add_mode(mode("b"));
        h.add_guard(0, 1, GuardDef::from_level(|x| x[0] - 1.0));
        let ctl = OpenLoop(|_q, _t, x: &[f64]| vec![2.0 - x[0]]);
        let run = integrate_segment(&h, 0, &ctl, &[0.0], 0.0, 5.0, dt).unwrap();
        let SegmentExit::Guard { t, .. } = run.exit else { panic!() };
        t
    }

    #[test]
    fn halving_dt_halves_crossing_error() {
        let exact = std::f64::consts::LN_2;
        let e1 = (held_feedback_crossing(2e-2) - exact).abs();
        let e2 = (held_feedback_crossing(1e-2) - exact).abs();
        assert!(e1 / e2 >= 1.8, "errors {e1:.3e} {e2:.3e}");
    }

    #[test]
    fn csv_is_deterministic_and_duplicates_switch_rows() {
        let h = line(&[1.0]);
        let s = SimSettings { dt: 0.25, horizon: 2.0 };
        let a = run_hybrid(&h, &zero(), &[0.0], 0, &s).unwrap().to_csv_string();
        let b = run_hybrid(&h, &zero(), &[0.0], 0, &s).unwrap().to_csv_string();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], "t,mode,x0,u0,h_active");
        let switch_rows: Vec<&&str> = lines.iter().filter(|l| l.starts_with("1,")).collect();
        assert_eq!(switch_rows.len(), 2, "{a}");
        assert!(switch_rows[0].starts_with("1,a,") && switch_rows[1].starts_with("1,b0,"));
    }

    fn integrator_with_cbf(policy: Policy) -> (Arc<HybridAutomaton>, SwitchingLaw) {
        let mut h = HybridAutomaton::new(1, 1);
        h.add_mode(ModeDef {
            name: "m".into(),
            drift: Arc::new(|_x, out| out[0] = 0.0),
            input_matrix: Arc::new(|_x, out| out[0] = 1.0),
            control_box: BoxSet::symmetric(&[3.0]),
            domain: BoxSet::new(vec![-5.0], vec![5.0]),
        });
        let h = Arc::new(h);
        let cbf = CbfDef::analytic("bowl", 2.0, |x| 1.0 - x[0] * x[0], |x, g| g[0] = -2.0 * x[0]);
        let nominal = Arc::new(|_q: usize, t: f64, _x: &[f64]| vec![3.0 * (3.0 * t).sin().signum()]);
        let law = SwitchingLaw::new(h.clone(), vec![cbf], nominal, policy);
        (h, law)
    }

    #[test]
    fn filtered_integrator_stays_in_the_bowl() {
        let (h, law) = integrator_with_cbf(Policy::SwitchUnaware);
        let traj = run_hybrid(&h, &law, &[0.0], 0, &SimSettings { dt: 1e-2, horizon: 6.0 }).unwrap();
        for (_, _, x, u, _) in traj.samples() {
            assert!(x[0].abs() <= 1.0 + 1e-3, "left the safe set at {x:?}");
            assert!(u[0].abs() <= 3.0);
        }
        let verdict = check_pairwise_safety(&traj, &law.local).unwrap();
        assert!(verdict.safe);
    }

    #[test]
    fn unfiltered_integrator_is_flagged() {
        let (h, law) = integrator_with_cbf(Policy::SwitchUnaware);
        let ctl = OpenLoop(|_q, _t, _x: &[f64]| vec![1.0]);
        let traj = run_hybrid(&h, &ctl, &[0.0], 0, &SimSettings { dt: 1e-2, horizon: 3.0 }).unwrap();
        let verdict = check_pairwise_safety(&traj, &law.local).unwrap();
        assert!(!verdict.safe);
        let v = verdict.first_violation.unwrap();
        assert!(v.h < -1e-3 && v.t > 1.0);
    }

    #[test]
    fn second_assumption_passes_when_kernel_misses_guard() {
        let h = line(&[1.0]);
        let grid = Grid::new(vec![crate::grid::Axis::new(21, -2.0, 3.0)]).unwrap();
        let miss = crate::grid::sample_to_grid(&|x| 0.5 - x[0], &grid).unwrap();
        let any = GridFn::constant(grid.clone(), 1.0);
        let report = check_global_preconditions(&h, &[miss, any], &[1.0, 1.0], &[(0, vec![0.0])]).unwrap();
        assert!(report.assumptions[1].passed, "{report}");
        assert!(report.assumptions[1].detail.contains("misses"));
    }
}
