//! Semi-Lagrangian value iteration for unsafe backward sets and CBF refinement.
//!
//! Both computations iterate Jacobi sweeps of the form
//!
//! ```text
//! V⁺(x) = min( cap(x), φ( max_u V(x + dt·F_q(x, u)) ) )
//! ```
//!
//! where `V` is read by multilinear interpolation, `u` ranges over a uniform
//! lattice of the control box (corners included) and `φ(s) = s` for `s ≥ 0`,
//! `φ(s) = (1 − γ·dt)·s` otherwise. `φ` preserves signs, so the zero level set
//! does not depend on `γ`; it only lets negative values relax toward zero,
//! which makes the sweep a contraction on the unsafe region.
//!
//! Guard nodes of the transition are terminal: the flow of mode `q` stops
//! there because the jump is urgent, so their value is frozen at the cap.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interpolate_values, Grid, GridFn, ImplicitSet, SwitchingSets, MAX_DIM};
use crate::model::{HybridAutomaton, ScalarFn};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReachSettings {
    /// Time step of the one-step advection (s).
    pub dt: f64,
    /// Linear class-K coefficient (1/s).
    pub gamma: f64,
    /// Lattice points per input dimension.
    pub control_samples: usize,
    /// Sup-norm fixed-point tolerance.
    pub convergence_tol: f64,
    pub max_iters: usize,
    /// Fraction by which the control box is shrunk about its center during
    /// synthesis. The online filter keeps the full box, so a positive margin
    /// leaves spare authority for the linearized CBF condition.
    #[serde(default)]
    pub control_margin: f64,
}

impl Default for ReachSettings {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gamma: 1.0,
            control_samples: 3,
            convergence_tol: 1e-6,
            max_iters: 5000,
            control_margin: 0.0,
        }
    }
}

impl ReachSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Settings(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if self.gamma * self.dt >= 1.0 {
            return bad(format!(
                "gamma·dt = {} must stay below 1",
                self.gamma * self.dt
            ));
        }
        if self.control_samples < 2 {
            return bad(format!(
                "control_samples must be at least 2, got {}",
                self.control_samples
            ));
        }
        if !(self.convergence_tol > 0.0) {
            return bad(format!(
                "convergence_tol must be positive, got {}",
                self.convergence_tol
            ));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(0.0..1.0).contains(&self.control_margin) {
            return bad(format!(
                "control_margin must lie in [0, 1), got {}",
                self.control_margin
            ));
        }
        Ok(())
    }
}

/// Result of a value iteration.
#[derive(Clone, Debug)]
pub struct ReachOutcome {
    pub value: GridFn,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    /// `max ‖F‖·dt / cell diagonal` over nodes and control corners.
    pub cfl_ratio: f64,
}

/// Refined CBF `h_{q,q'}` of a transition.
#[derive(Clone, Debug)]
pub struct RefinedCbf {
    pub from: usize,
    pub to: usize,
    pub value: GridFn,
    pub gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    /// Every node is negative: mode `from` has no safe way to reach `to`.
    pub no_safe_switching: bool,
}

/// Uniform lattice over the control box, flattened with stride `m`.
pub fn control_lattice(lower: &[f64], upper: &[f64], samples: usize) -> Vec<f64> {
    let m = lower.len();
    let total = samples.pow(m as u32);
    let mut out = Vec::with_capacity(total * m);
    for idx in 0..total {
        let mut rem = idx;
        let mut u = vec![0.0; m];
        for j in (0..m).rev() {
            let i = rem % samples;
            rem /= samples;
            u[j] = if i + 1 == samples {
                upper[j]
            } else {
                lower[j] + (upper[j] - lower[j]) * i as f64 / (samples - 1) as f64
            };
        }
        out.extend_from_slice(&u);
    }
    out
}

/// One mode's advection operator on a grid.
struct Advection<'a> {
    automaton: &'a HybridAutomaton,
    mode: usize,
    grid: &'a Grid,
    controls: Vec<f64>,
    dt: f64,
    decay: f64,
    /// Level of the terminal guard; steps that enter it stop on its boundary.
    exit: ScalarFn,
}

const CHUNK: usize = 2048;

impl<'a> Advection<'a> {
    fn new(
        automaton: &'a HybridAutomaton,
        mode: usize,
        to: usize,
        grid: &'a Grid,
        settings: &ReachSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let exit = automaton
            .guard(mode, to)
            .ok_or_else(|| Error::Config(format!("no guard registered for ({mode}, {to})")))?
            .level_fn();
        if grid.ndim() != automaton.state_dim() {
            return Err(Error::GridMismatch(format!(
                "grid has {} axes, automaton state has {}",
                grid.ndim(),
                automaton.state_dim()
            )));
        }
        let cb = &automaton.mode(mode).control_box;
        let keep = 1.0 - settings.control_margin;
        let shrink = |b: &[f64]| -> Vec<f64> {
            b.iter()
                .zip(cb.center())
                .map(|(b, c)| c + keep * (b - c))
                .collect()
        };
        Ok(Self {
            automaton,
            mode,
            grid,
            controls: control_lattice(&shrink(&cb.lower), &shrink(&cb.upper), settings.control_samples),
            dt: settings.dt,
            decay: 1.0 - settings.gamma * settings.dt,
            exit,
        })
    }

    fn m(&self) -> usize {
        self.automaton.input_dim()
    }

    /// `max_u V(x + dt F(x, u))` at node `k`.
    fn best_successor(&self, values: &[f64], k: usize, scratch: &mut Scratch) -> Result<f64> {
        let n = self.grid.ndim();
        let m = self.m();
        self.grid.node(k, &mut scratch.x[..n]);
        let mut best = f64::NEG_INFINITY;
        for u in self.controls.chunks_exact(m) {
            self.automaton.eval_flow_into(
                self.mode,
                &scratch.x[..n],
                u,
                &mut scratch.xdot[..n],
                &mut scratch.g,
            )?;
            for i in 0..n {
                scratch.next[i] = scratch.x[i] + self.dt * scratch.xdot[i];
            }
            let g1 = (self.exit)(&scratch.next[..n]);
            if g1 >= 0.0 {
                // stop where the step crosses into the guard (linear in the level)
                let g0 = (self.exit)(&scratch.x[..n]);
                if g0 < 0.0 {
                    let tau = g0 / (g0 - g1);
                    for i in 0..n {
                        scratch.next[i] = scratch.x[i] + tau * self.dt * scratch.xdot[i];
                    }
                }
            }
            let v = interpolate_values(self.grid, values, &scratch.next[..n]);
            best = best.max(v);
        }
        Ok(best)
    }

    fn relax(&self, s: f64) -> f64 {
        if s >= 0.0 {
            s
        } else {
            self.decay * s
        }
    }

    /// Fixed-point iteration from `init`; `cap` bounds non-terminal nodes and
    /// terminal nodes keep their initial value.
    fn iterate(
        &self,
        init: Vec<f64>,
        cap: &[f64],
        terminal: &[bool],
        settings: &ReachSettings,
    ) -> Result<(Vec<f64>, usize, bool, f64)> {
        let mut prev = init;
        let mut next = prev.clone();
        let mut residual = f64::INFINITY;
        for iter in 1..=settings.max_iters {
            residual = next
                .par_chunks_mut(CHUNK)
                .enumerate()
                .map(|(c, out)| -> Result<f64> {
                    let mut scratch = Scratch::new(self.grid.ndim(), self.m());
                    let mut worst = 0.0f64;
                    for (i, slot) in out.iter_mut().enumerate() {
                        let k = c * CHUNK + i;
                        if terminal[k] {
                            continue;
                        }
                        let s = self.best_successor(&prev, k, &mut scratch)?;
                        let v = cap[k].min(self.relax(s));
                        worst = worst.max((v - prev[k]).abs());
                        *slot = v;
                    }
                    Ok(worst)
                })
                .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
            std::mem::swap(&mut prev, &mut next);
            if residual <= settings.convergence_tol {
                return Ok((prev, iter, true, residual));
            }
            if iter % 100 == 0 {
                log::debug!("sweep {iter}: residual {residual:.3e}");
            }
        }
        Ok((prev, settings.max_iters, false, residual))
    }

    fn cfl_ratio(&self) -> Result<f64> {
        let n = self.grid.ndim();
        let m = self.m();
        let cb = &self.automaton.mode(self.mode).control_box;
        let corners = control_lattice(&cb.lower, &cb.upper, 2);
        let mut scratch = Scratch::new(n, m);
        let mut worst = 0.0f64;
        for k in 0..self.grid.len() {
            self.grid.node(k, &mut scratch.x[..n]);
            for u in corners.chunks_exact(m) {
                self.automaton.eval_flow_into(
                    self.mode,
                    &scratch.x[..n],
                    u,
                    &mut scratch.xdot[..n],
                    &mut scratch.g,
                )?;
                let speed = scratch.xdot[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(speed);
            }
        }
        let ratio = worst * self.dt / self.grid.cell_diagonal();
        if ratio > 1.0 {
            log::warn!(
                "dt = {} moves up to {:.2} cell diagonals per step in mode {}",
                self.dt,
                ratio,
                self.automaton.mode(self.mode).name
            );
        }
        Ok(ratio)
    }
}

struct Scratch {
    x: [f64; MAX_DIM],
    xdot: [f64; MAX_DIM],
    next: [f64; MAX_DIM],
    g: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, m: usize) -> Self {
        Self {
            x: [0.0; MAX_DIM],
            xdot: [0.0; MAX_DIM],
            next: [0.0; MAX_DIM],
            g: vec![0.0; n * m],
        }
    }
}

fn guard_mask(guard: &GridFn) -> Vec<bool> {
    guard.values().iter().map(|g| *g >= 0.0).collect()
}

/// Avoid value `W` of the unsafe switching set under mode `from`'s flow.
///
/// `W(x) < 0` exactly when every admissible control drives the state into
/// the unsafe switching set. Guard nodes are terminal and hold the unsafe
/// level with its sign flipped. The unsafe set lies inside the guard, so off
/// the guard `W` is only bounded by a constant; there it ends up as the best
/// successor margin reachable at the guard crossing. The returned field is the
/// level function of the unsafe backward set, `-W`: nonnegative inside it.
pub fn compute_back_unsafe(
    automaton: &HybridAutomaton,
    sets: &SwitchingSets,
    settings: &ReachSettings,
) -> Result<ReachOutcome> {
    let grid = sets.unsafe_set.grid();
    // plain reachability: no decay, so the level keeps its magnitude far from the guard
    let settings = &ReachSettings {
        gamma: 0.0,
        ..settings.clone()
    };
    let adv = Advection::new(automaton, sets.from, sets.to, grid, settings)?;
    let cfl_ratio = adv.cfl_ratio()?;
    let terminal = guard_mask(&sets.guard);
    let bound = sets
        .unsafe_on_guard
        .values()
        .iter()
        .zip(&terminal)
        .filter(|(_, t)| **t)
        .fold(1.0f64, |m, (v, _)| m.max(v.abs()));
    let cap: Vec<f64> = sets
        .unsafe_on_guard
        .values()
        .iter()
        .zip(&terminal)
        .map(|(on_guard, t)| if *t { -on_guard } else { bound })
        .collect();
    let init = cap.clone();
    let (w, iterations, converged, residual) = adv.iterate(init, &cap, &terminal, settings)?;
    if !converged {
        log::warn!("unsafe backward set did not converge: residual {residual:.3e} after {iterations} sweeps");
    }
    let level = w.into_iter().map(|v| -v).collect();
    Ok(ReachOutcome {
        value: GridFn::new(grid.clone(), level)?,
        iterations,
        converged,
        residual,
        cfl_ratio,
    })
}

/// Refines `h_init` (the local CBF of `from`) so that its zero superlevel set
/// stays inside `C_from` and outside the unsafe backward set.
pub fn refine_cbf(
    automaton: &HybridAutomaton,
    from: usize,
    to: usize,
    h_init: &ImplicitSet,
    back_unsafe: &GridFn,
    settings: &ReachSettings,
) -> Result<RefinedCbf> {
    let grid = back_unsafe.grid();
    let guard_def = automaton
        .guard(from, to)
        .ok_or_else(|| Error::Config(format!("no guard registered for ({from}, {to})")))?;
    let guard = crate::grid::sample_to_grid(&*guard_def.level_fn(), grid)?;
    let terminal = guard_mask(&guard);
    let adv = Advection::new(automaton, from, to, grid, settings)?;
    let h = h_init.sample(grid)?;
    let constraint: Vec<f64> = h
        .values()
        .iter()
        .zip(back_unsafe.values())
        .map(|(h, bu)| h.min(-bu))
        .collect();
    let (v, iterations, converged, residual) =
        adv.iterate(constraint.clone(), &constraint, &terminal, settings)?;
    if !converged {
        log::warn!("refinement ({from}, {to}) did not converge: residual {residual:.3e}");
    }
    let no_safe_switching = v.iter().all(|x| *x < 0.0);
    Ok(RefinedCbf {
        from,
        to,
        value: GridFn::new(grid.clone(), v)?,
        gamma: settings.gamma,
        iterations,
        converged,
        residual,
        no_safe_switching,
    })
}

/// Node-level check of the discrete CBF inequality
/// `max_u V(x + dt F(x,u)) ≥ (1 − γ dt) V(x) − tol` over interior,
/// non-guard nodes with `V(x) ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityReport {
    pub checked: usize,
    pub satisfied: usize,
    /// Worst slack `max_u V(x⁺) − (1 − γ dt) V(x)` found.
    pub worst_slack: f64,
}

impl ValidityReport {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.satisfied as f64 / self.checked as f64
        }
    }
}

pub fn check_refined_validity(
    automaton: &HybridAutomaton,
    refined: &RefinedCbf,
    settings: &ReachSettings,
    tol: f64,
) -> Result<ValidityReport> {
    let grid = refined.value.grid();
    let adv = Advection::new(automaton, refined.from, refined.to, grid, settings)?;
    let guard_def = automaton
        .guard(refined.from, refined.to)
        .ok_or_else(|| Error::Config("refined transition has no guard".into()))?;
    let values = refined.value.values();
    let mut scratch = Scratch::new(grid.ndim(), automaton.input_dim());
    let mut report = ValidityReport {
        checked: 0,
        satisfied: 0,
        worst_slack: f64::INFINITY,
    };
    let factor = 1.0 - refined.gamma * settings.dt;
    for k in 0..grid.len() {
        if values[k] < 0.0 || grid.is_boundary_node(k) {
            continue;
        }
        if guard_def.level(&grid.node_vec(k)) >= 0.0 {
            continue;
        }
        report.checked += 1;
        let best = adv.best_successor(values, k, &mut scratch)?;
        let slack = best - factor * values[k];
        report.worst_slack = report.worst_slack.min(slack);
        if slack >= -tol {
            report.satisfied += 1;
        }
    }
    Ok(report)
}

/// Everything computed for one transition: switching sets, the unsafe
/// backward set and the refined CBF.
#[derive(Clone, Debug)]
pub struct TransitionSynthesis {
    pub sets: SwitchingSets,
    pub back_unsafe: ReachOutcome,
    pub refined: RefinedCbf,
}

/// Runs set identification, the backward computation and refinement for
/// `from → to`.
pub fn synthesize_transition(
    automaton: &HybridAutomaton,
    from: usize,
    to: usize,
    cbf_from: &ImplicitSet,
    cbf_to: &ImplicitSet,
    grid: &Grid,
    settings: &ReachSettings,
) -> Result<TransitionSynthesis> {
    let sets = crate::grid::switching_sets(automaton, from, to, cbf_from, cbf_to, grid)?;
    let back_unsafe = compute_back_unsafe(automaton, &sets, settings)?;
    let refined = refine_cbf(automaton, from, to, cbf_from, &back_unsafe.value, settings)?;
    log::info!(
        "{} -> {}: backward set {} sweeps, refinement {} sweeps, {} kernel nodes",
        automaton.mode(from).name,
        automaton.mode(to).name,
        back_unsafe.iterations,
        refined.iterations,
        refined.value.count_nonnegative()
    );
    Ok(TransitionSynthesis {
        sets,
        back_unsafe,
        refined,
    })
}
