//! CBF constraints, the minimally invasive QP filter and switching policies.
//!
//! For a CBF `h` with `α(h) = γh` the admissible inputs at `x` form the
//! halfspace `∇h·g(x) u ≥ −∇h·f(x) − γ h(x)`. Several CBFs intersect their
//! halfspaces; the filter returns the input closest to the nominal one.

mod qp;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{GridFn, ImplicitSet};
use crate::model::{BoxSet, HybridAutomaton, ModeDef, ScalarFn};

pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Nominal controller `(mode, t, x) ↦ u`.
pub type NominalFn = Arc<dyn Fn(usize, f64, &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum CbfShape {
    Analytic { value: ScalarFn, gradient: GradientFn },
    Gridded(GridFn),
}

/// A control barrier function with linear class-K coefficient `gamma`.
#[derive(Clone)]
pub struct CbfDef {
    pub name: String,
    pub shape: CbfShape,
    pub gamma: f64,
}

impl fmt::Debug for CbfDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.shape {
            CbfShape::Analytic { .. } => "analytic",
            CbfShape::Gridded(_) => "gridded",
        };
        f.debug_struct("CbfDef")
            .field("name", &self.name)
            .field("kind", &kind)
            .field("gamma", &self.gamma)
            .finish()
    }
}

impl CbfDef {
    pub fn analytic(
        name: impl Into<String>,
        gamma: f64,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            shape: CbfShape::Analytic {
                value: Arc::new(value),
                gradient: Arc::new(gradient),
            },
            gamma,
        }
    }

    pub fn gridded(name: impl Into<String>, gamma: f64, field: GridFn) -> Self {
        Self {
            name: name.into(),
            shape: CbfShape::Gridded(field),
            gamma,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.shape {
            CbfShape::Analytic { value, .. } => value(x),
            CbfShape::Gridded(g) => g.interpolate(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        match &self.shape {
            CbfShape::Analytic { gradient, .. } => gradient(x, &mut out),
            CbfShape::Gridded(g) => g.gradient_into(x, &mut out),
        }
        out
    }

    pub fn as_set(&self) -> ImplicitSet {
        match &self.shape {
            CbfShape::Analytic { value, .. } => ImplicitSet::Analytic(value.clone()),
            CbfShape::Gridded(g) => ImplicitSet::Gridded(g.clone()),
        }
    }

    /// Level below which a sampled value counts as a violation of this CBF's
    /// safe set: 1e-3 for analytic CBFs, one cell diagonal for gridded ones.
    pub fn violation_tol(&self) -> f64 {
        match &self.shape {
            CbfShape::Analytic { .. } => 1e-3,
            CbfShape::Gridded(g) => g.grid().cell_diagonal(),
        }
    }

    /// Counts sampled boundary nodes of a gridded CBF whose gradient norm is
    /// below `1e-6`, where the invariance argument breaks down. Analytic CBFs
    /// return zero.
    pub fn flat_boundary_nodes(&self) -> usize {
        let CbfShape::Gridded(g) = &self.shape else {
            return 0;
        };
        let grid = g.grid();
        let vals = g.values();
        let mut idx = vec![0usize; grid.ndim()];
        let mut flat = 0;
        for k in 0..grid.len() {
            if grid.is_boundary_node(k) {
                continue;
            }
            grid.multi_index(k, &mut idx);
            let crosses = (0..grid.ndim()).any(|d| {
                let s = grid.strides()[d];
                idx[d] + 1 < grid.axes()[d].count && (vals[k] >= 0.0) != (vals[k + s] >= 0.0)
            });
            if crosses {
                let grad = g.gradient(&grid.node_vec(k));
                if grad.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
                    flat += 1;
                }
            }
        }
        if flat > 0 {
            log::warn!("{}: {flat} boundary nodes with vanishing gradient", self.name);
        }
        flat
    }
}

/// `a·u ≥ b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfspaceConstraint {
    pub a: Vec<f64>,
    pub b: f64,
}

impl HalfspaceConstraint {
    pub fn slack(&self, u: &[f64]) -> f64 {
        self.a.iter().zip(u).map(|(a, u)| a * u).sum::<f64>() - self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub u: Vec<f64>,
    pub feasible: bool,
    /// Indices of constraints active at `u`.
    pub active_constraints: Vec<usize>,
    pub nominal_unchanged: bool,
    /// Scale-relative KKT residual of the returned point (zero on passthrough).
    pub kkt_residual: f64,
}

/// Halfspace of admissible inputs for `cbf` in `mode` at `x`.
pub fn build_constraint(cbf: &CbfDef, mode: &ModeDef, x: &[f64]) -> Result<HalfspaceConstraint> {
    let n = x.len();
    let m = mode.control_box.dim();
    let grad = cbf.gradient(x);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Gradient {
            cbf: cbf.name.clone(),
            state: x.to_vec(),
        });
    }
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    (mode.drift)(x, &mut f);
    (mode.input_matrix)(x, &mut g);
    let a: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| grad[i] * g[i * m + j]).sum())
        .collect();
    let lf: f64 = grad.iter().zip(&f).map(|(d, f)| d * f).sum();
    let b = -lf - cbf.gamma * cbf.value(x);
    if !b.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dynamics {
            mode: mode.name.clone(),
            state: x.to_vec(),
        });
    }
    Ok(HalfspaceConstraint { a, b })
}

/// Intersection of per-successor safe control sets: the halfspace lists are
/// concatenated; emptiness shows up as an infeasible filter result.
pub fn safe_control_set_intersection(per_successor: Vec<Vec<HalfspaceConstraint>>) -> Vec<HalfspaceConstraint> {
    per_successor.into_iter().flatten().collect()
}

fn problem_scale(u_nom: &[f64], bounds: &BoxSet) -> f64 {
    u_nom
        .iter()
        .chain(&bounds.lower)
        .chain(&bounds.upper)
        .fold(1.0f64, |s, v| s.max(v.abs()))
}

/// `argmin ‖u − u_nom‖²` over the constraints and the box.
///
/// When the constraints cannot be met inside the box the result is marked
/// infeasible and `u` minimises the largest (unit-normalised) constraint
/// violation, taking the point closest to `u_nom` among those.
pub fn filter_qp(u_nom: &[f64], constraints: &[HalfspaceConstraint], bounds: &BoxSet) -> FilterResult {
    let m = u_nom.len();
    let scale = problem_scale(u_nom, bounds);
    let tol = 1e-10 * scale;

    if bounds.contains(u_nom) && constraints.iter().all(|c| c.slack(u_nom) >= 0.0) {
        return FilterResult {
            u: u_nom.to_vec(),
            feasible: true,
            active_constraints: Vec::new(),
            nominal_unchanged: true,
            kkt_residual: 0.0,
        };
    }

    // normalised user rows; degenerate rows are either vacuous or contradictory
    let mut rows = Vec::with_capacity(constraints.len() + 2 * m);
    let mut origin = Vec::with_capacity(constraints.len());
    let mut degenerate_violation = 0.0f64;
    for (i, c) in constraints.iter().enumerate() {
        let norm = c.a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-14 * scale.max(c.b.abs()) {
            degenerate_violation = degenerate_violation.max(c.b);
            continue;
        }
        rows.push(qp::Row {
            a: c.a.iter().map(|v| v / norm).collect(),
            b: c.b / norm,
        });
        origin.push(i);
    }
    let user_rows = rows.len();
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        rows.push(qp::Row { a: e.clone(), b: bounds.lower[j] });
        e[j] = -1.0;
        rows.push(qp::Row { a: e, b: -bounds.upper[j] });
    }

    let solved = if degenerate_violation > tol {
        None
    } else {
        qp::project(u_nom, &rows, tol)
    };
    if let Some(mut p) = solved {
        // rounding can leave the point a few ulps outside the box
        bounds.clamp(&mut p.u);
        let kkt = kkt_residual(u_nom, &rows, &p) / scale;
        return FilterResult {
            active_constraints: active_user_rows(&p.u, &rows[..user_rows], &origin, tol),
            u: p.u,
            feasible: true,
            nominal_unchanged: false,
            kkt_residual: kkt,
        };
    }

    // least-infeasible fallback: bisect on a uniform relaxation t of the user rows
    let mut center = u_nom.to_vec();
    bounds.clamp(&mut center);
    let violation_at = |u: &[f64]| {
        rows[..user_rows]
            .iter()
            .map(|r| r.b - r.a.iter().zip(u).map(|(a, u)| a * u).sum::<f64>())
            .fold(0.0f64, f64::max)
    };
    let relaxed = |t: f64| -> Vec<qp::Row> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| qp::Row {
                a: r.a.clone(),
                b: if i < user_rows { r.b - t } else { r.b },
            })
            .collect()
    };
    let mut lo = 0.0;
    let mut hi = violation_at(&center);
    let mut best = qp::project(u_nom, &relaxed(hi), tol);
    for _ in 0..100 {
        if hi - lo <= 1e-12 * scale {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match qp::project(u_nom, &relaxed(mid), tol) {
            Some(p) => {
                hi = mid;
                best = Some(p);
            }
            None => lo = mid,
        }
    }
    let mut u = best.map(|p| p.u).unwrap_or(center);
    bounds.clamp(&mut u);
    FilterResult {
        active_constraints: active_user_rows(&u, &rows[..user_rows], &origin, hi + tol),
        u,
        feasible: false,
        nominal_unchanged: false,
        kkt_residual: f64::NAN,
    }
}

fn active_user_rows(u: &[f64], rows: &[qp::Row], origin: &[usize], tol: f64) -> Vec<usize> {
    rows.iter()
        .zip(origin)
        .filter(|(r, _)| {
            let s = r.a.iter().zip(u).map(|(a, u)| a * u).sum::<f64>() - r.b;
            s.abs() <= tol.max(1e-9)
        })
        .map(|(_, i)| *i)
        .collect()
}

/// Max of stationarity, primal and dual residuals.
fn kkt_residual(u_nom: &[f64], rows: &[qp::Row], p: &qp::Projection) -> f64 {
    let m = u_nom.len();
    let mut stat: Vec<f64> = (0..m).map(|j| p.u[j] - u_nom[j]).collect();
    for (&i, l) in p.active.iter().zip(&p.multipliers) {
        for j in 0..m {
            stat[j] -= l * rows[i].a[j];
        }
    }
    let stationarity = stat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let primal = rows
        .iter()
        .map(|r| r.b - r.a.iter().zip(&p.u).map(|(a, u)| a * u).sum::<f64>())
        .fold(0.0f64, f64::max);
    let dual = p.multipliers.iter().fold(0.0f64, |a, l| a.max(-l));
    stationarity.max(primal).max(dual)
}

/// Which CBFs a switching controller enforces in each mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Refined `h_{q,q'}` for the planned successor `q'`; local `h_q` in modes
    /// without outgoing transitions.
    Refined,
    /// Intersection of the refined CBFs of every outgoing transition.
    GlobalIntersection,
    /// Local `h_q` only, ignoring upcoming jumps.
    SwitchUnaware,
    /// One CBF shared by every mode.
    GlobalCbf,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Refined,
        Policy::GlobalIntersection,
        Policy::SwitchUnaware,
        Policy::GlobalCbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Refined => "refined",
            Policy::GlobalIntersection => "global-intersection",
            Policy::SwitchUnaware => "switch-unaware",
            Policy::GlobalCbf => "global-cbf",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

/// Output of one controller evaluation.
#[derive(Clone, Debug)]
pub struct ControlDecision {
    pub u_nominal: Vec<f64>,
    pub filter: FilterResult,
    /// Smallest value among the CBFs enforced at this state.
    pub h_active: f64,
}

/// A switching feedback law `k(q, x)`: nominal control filtered through the
/// CBFs selected by `policy`.
#[derive(Clone)]
pub struct SwitchingLaw {
    pub automaton: Arc<HybridAutomaton>,
    pub local: Vec<CbfDef>,
    pub refined: BTreeMap<(usize, usize), CbfDef>,
    pub global: Option<CbfDef>,
    pub policy: Policy,
    /// Planned successor per mode, needed by [`Policy::Refined`] when a mode
    /// has several outgoing transitions.
    pub planned: BTreeMap<usize, usize>,
    /// Transitions considered by [`Policy::GlobalIntersection`]; all when `None`.
    pub transition_subset: Option<BTreeSet<(usize, usize)>>,
    pub nominal: NominalFn,
}

impl fmt::Debug for SwitchingLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchingLaw")
            .field("policy", &self.policy)
            .field("local", &self.local)
            .field("refined", &self.refined.keys().collect::<Vec<_>>())
            .field("global", &self.global)
            .finish_non_exhaustive()
    }
}

impl SwitchingLaw {
    pub fn new(
        automaton: Arc<HybridAutomaton>,
        local: Vec<CbfDef>,
        nominal: NominalFn,
        policy: Policy,
    ) -> Self {
        Self {
            automaton,
            local,
            refined: BTreeMap::new(),
            global: None,
            policy,
            planned: BTreeMap::new(),
            transition_subset: None,
            nominal,
        }
    }

    pub fn with_refined(mut self, refined: BTreeMap<(usize, usize), CbfDef>) -> Self {
        self.refined = refined;
        self
    }

    pub fn with_global(mut self, global: Option<CbfDef>) -> Self {
        self.global = global;
        self
    }

    fn refined_for(&self, q: usize, to: usize) -> Result<&CbfDef> {
        self.refined.get(&(q, to)).ok_or_else(|| {
            Error::Config(format!(
                "policy {} needs a refined CBF for {} -> {}",
                self.policy,
                self.automaton.mode(q).name,
                self.automaton.mode(to).name
            ))
        })
    }

    /// CBFs enforced in mode `q`.
    pub fn active_cbfs(&self, q: usize) -> Result<Vec<&CbfDef>> {
        let local = || {
            self.local.get(q).ok_or_else(|| {
                Error::Config(format!("no local CBF for mode {}", self.automaton.mode(q).name))
            })
        };
        let successors: Vec<usize> = self.automaton.outgoing(q).map(|(to, _)| to).collect();
        match self.policy {
            Policy::SwitchUnaware => Ok(vec![local()?]),
            Policy::GlobalCbf => self
                .global
                .as_ref()
                .map(|g| vec![g])
                .ok_or_else(|| Error::Config("global-cbf policy: not applicable, no global CBF".into())),
            Policy::Refined => {
                let to = match (self.planned.get(&q), successors.as_slice()) {
                    (Some(to), _) => *to,
                    (None, []) => return Ok(vec![local()?]),
                    (None, [only]) => *only,
                    (None, _) => {
                        return Err(Error::Config(format!(
                            "mode {} has several successors; refined policy needs a planned one",
                            self.automaton.mode(q).name
                        )))
                    }
                };
                Ok(vec![self.refined_for(q, to)?])
            }
            Policy::GlobalIntersection => {
                let chosen: Vec<usize> = successors
                    .into_iter()
                    .filter(|to| {
                        self.transition_subset
                            .as_ref()
                            .is_none_or(|s| s.contains(&(q, *to)))
                    })
                    .collect();
                if chosen.is_empty() {
                    return Ok(vec![local()?]);
                }
                chosen.into_iter().map(|to| self.refined_for(q, to)).collect()
            }
        }
    }

    /// Filters `u_nom` through the policy's constraints at `(q, x)`.
    pub fn filter(&self, q: usize, x: &[f64], u_nom: &[f64]) -> Result<(FilterResult, f64)> {
        let mode = self.automaton.mode(q);
        let cbfs = self.active_cbfs(q)?;
        let per_cbf = cbfs
            .iter()
            .map(|c| build_constraint(c, mode, x).map(|h| vec![h]))
            .collect::<Result<Vec<_>>>()?;
        let constraints = safe_control_set_intersection(per_cbf);
        let h_active = cbfs
            .iter()
            .map(|c| c.value(x))
            .fold(f64::INFINITY, f64::min);
        Ok((filter_qp(u_nom, &constraints, &mode.control_box), h_active))
    }

    pub fn control(&self, q: usize, t: f64, x: &[f64]) -> Result<ControlDecision> {
        let u_nominal = (self.nominal)(q, t, x);
        let (filter, h_active) = self.filter(q, x, &u_nominal)?;
        Ok(ControlDecision {
            u_nominal,
            filter,
            h_active,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mode_1d(drift: fn(f64) -> f64) -> ModeDef {
        ModeDef {
            name: "m".into(),
            drift: Arc::new(move |x, out| out[0] = drift(x[0])),
            input_matrix: Arc::new(|_x, out| out[0] = 1.0),
            control_box: BoxSet::symmetric(&[10.0]),
            domain: BoxSet::new(vec![-10.0], vec![10.0]),
        }
    }

    fn identity_cbf(gamma: f64) -> CbfDef {
        CbfDef::analytic("x", gamma, |x| x[0], |_x, g| g[0] = 1.0)
    }

    #[test]
    fn constraint_for_single_integrator() {
        let c = build_constraint(&identity_cbf(1.0), &mode_1d(|_| 0.0), &[2.0]).unwrap();
        assert_eq!(c, HalfspaceConstraint { a: vec![1.0], b: -2.0 });
    }

    #[test]
    fn constraint_with_drift() {
        let c = build_constraint(&identity_cbf(0.0), &mode_1d(|x| -x), &[3.0]).unwrap();
        assert_eq!(c, HalfspaceConstraint { a: vec![1.0], b: 3.0 });
    }

    #[test]
    fn degenerate_row_is_vacuous_when_satisfied() {
        // h = 5 - x² at x = 0 has zero gradient, the row reads 0·u ≥ -5
        let cbf = CbfDef::analytic("bowl", 1.0, |x| 5.0 - x[0] * x[0], |x, g| g[0] = -2.0 * x[0]);
        let c = build_constraint(&cbf, &mode_1d(|_| 1.0), &[0.0]).unwrap();
        assert_eq!(c.a, vec![-0.0]);
        assert!(c.b <= 0.0);
        let r = filter_qp(&[3.0], &[c], &BoxSet::symmetric(&[10.0]));
        assert!(r.feasible && r.nominal_unchanged);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let cbf = CbfDef::analytic("bad", 1.0, |x| x[0], |_x, g| g[0] = f64::NAN);
        assert!(matches!(
            build_constraint(&cbf, &mode_1d(|_| 0.0), &[0.0]),
            Err(Error::Gradient { .. })
        ));
    }

    #[test]
    fn passthrough_when_nominal_is_admissible() {
        let c = HalfspaceConstraint { a: vec![1.0], b: -2.0 };
        let r = filter_qp(&[0.3], &[c], &BoxSet::symmetric(&[1.0]));
        assert_eq!(r.u, vec![0.3]);
        assert!(r.nominal_unchanged && r.feasible);
    }

    #[test]
    fn projects_onto_single_halfspace() {
        let c = HalfspaceConstraint { a: vec![2.0], b: 1.0 };
        let r = filter_qp(&[0.0], &[c], &BoxSet::symmetric(&[1.0]));
        assert!(r.feasible && !r.nominal_unchanged);
        assert_abs_diff_eq!(r.u[0], 0.5, epsilon = 1e-15);
        assert_eq!(r.active_constraints, vec![0]);
        assert!(r.kkt_residual <= 1e-12);
    }

    #[test]
    fn box_conflict_is_infeasible() {
        let c = HalfspaceConstraint { a: vec![1.0], b: 1.0 };
        let r = filter_qp(&[0.0], &[c], &BoxSet::new(vec![-1.0], vec![0.5]));
        assert!(!r.feasible);
        assert_abs_diff_eq!(r.u[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn redundant_constraints_keep_the_binding_one() {
        let list = safe_control_set_intersection(vec![
            vec![HalfspaceConstraint { a: vec![1.0], b: -1.0 }],
            vec![HalfspaceConstraint { a: vec![1.0], b: 0.0 }],
        ]);
        assert_eq!(list.len(), 2);
        let r = filter_qp(&[-0.5], &list, &BoxSet::symmetric(&[1.0]));
        assert_abs_diff_eq!(r.u[0], 0.0, epsilon = 1e-15);
        assert_eq!(r.active_constraints, vec![1]);
    }

    #[test]
    fn contradictory_successors_are_infeasible() {
        let list = safe_control_set_intersection(vec![
            vec![HalfspaceConstraint { a: vec![1.0], b: 1.0 }],
            vec![HalfspaceConstraint { a: vec![-1.0], b: 1.0 }],
        ]);
        let r = filter_qp(&[0.2], &list, &BoxSet::symmetric(&[5.0]));
        assert!(!r.feasible);
        // least-infeasible point balances both violations
        assert_abs_diff_eq!(r.u[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("bogus".parse::<Policy>().is_err());
    }
}
