//! Implicit sets and the safe/unsafe switching sets of a transition.
//!
//! Every set is the superlevel set `{x : level(x) ≥ 0}` of some function.
//! Intersection is a pointwise min, complement a negation; a set difference
//! `A \ B` is encoded as `min(level_A, -level_B)`.

use std::fmt;
use std::sync::Arc;

use super::{sample_to_grid, Grid, GridFn};
use crate::error::{Error, Result};
use crate::model::{HybridAutomaton, ScalarFn};

#[derive(Clone)]
pub enum ImplicitSet {
    Analytic(ScalarFn),
    Gridded(GridFn),
}

impl ImplicitSet {
    pub fn analytic(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ImplicitSet::Analytic(Arc::new(f))
    }

    pub fn level(&self, x: &[f64]) -> f64 {
        match self {
            ImplicitSet::Analytic(f) => f(x),
            ImplicitSet::Gridded(g) => g.interpolate(x),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.level(x) >= 0.0
    }

    /// Values at the nodes of `grid`. A gridded set on the same grid is
    /// copied verbatim; otherwise it is interpolated.
    pub fn sample(&self, grid: &Grid) -> Result<GridFn> {
        match self {
            ImplicitSet::Gridded(g) if g.grid() == grid => Ok(g.clone()),
            _ => sample_to_grid(&|x| self.level(x), grid),
        }
    }
}

impl fmt::Debug for ImplicitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImplicitSet::Analytic(_) => f.write_str("ImplicitSet::Analytic"),
            ImplicitSet::Gridded(g) => f
                .debug_tuple("ImplicitSet::Gridded")
                .field(&g.grid().axes())
                .finish(),
        }
    }
}

/// Sampled switching sets for one transition `q → q'`.
#[derive(Clone, Debug)]
pub struct SwitchingSets {
    pub from: usize,
    pub to: usize,
    /// `Guard ∩ C_q ∩ C_q'`.
    pub safe: GridFn,
    /// `(Guard ∩ C_q) \ S`, i.e. `Guard ∩ C_q ∩ ¬C_q'`.
    pub unsafe_set: GridFn,
    /// Guard level function on the nodes.
    pub guard: GridFn,
    /// `-h_q'` on every node: the successor's violation with the guard and
    /// `C_q` factors dropped. It agrees in sign with `unsafe_set` on guard
    /// nodes inside `C_q`. Outside `C_q` it keeps the successor's magnitude
    /// instead of the small `h_q` margin, so values interpolated across the
    /// edge of `C_q` on the guard are not optimistic.
    pub unsafe_on_guard: GridFn,
}

pub fn switching_sets(
    automaton: &HybridAutomaton,
    from: usize,
    to: usize,
    cbf_from: &ImplicitSet,
    cbf_to: &ImplicitSet,
    grid: &Grid,
) -> Result<SwitchingSets> {
    let guard_def = automaton.guard(from, to).ok_or_else(|| {
        Error::Config(format!("no guard registered for transition ({from}, {to})"))
    })?;
    let domain = &automaton.mode(from).domain;
    if !grid.covers(&domain.lower, &domain.upper) {
        log::warn!(
            "grid does not cover the domain of mode {}",
            automaton.mode(from).name
        );
    }
    let level = guard_def.level_fn();
    let guard = sample_to_grid(&*level, grid)?;
    let h_from = cbf_from.sample(grid)?;
    let h_to = cbf_to.sample(grid)?;
    let not_to = h_to.negate();
    let in_guard_and_from = guard.min(&h_from)?;
    let safe = in_guard_and_from.min(&h_to)?;
    let unsafe_set = in_guard_and_from.min(&not_to)?;
    let unsafe_on_guard = not_to;
    Ok(SwitchingSets {
        from,
        to,
        safe,
        unsafe_set,
        guard,
        unsafe_on_guard,
    })
}
