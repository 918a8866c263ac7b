//! Hybrid input automata with control-affine mode dynamics.
//!
//! A mode `q` flows as `ẋ = f_q(x) + g_q(x) u` with `u` restricted to an
//! axis-aligned control box. A guard `(q, q')` is an implicit set
//! `{x : level(x) ≥ 0}`; transitions are urgent, firing as soon as the state
//! enters the guard. The continuous state never jumps.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `f(x)` written into an `n`-vector.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `g(x)` written row-major into an `n × m` buffer.
pub type InputMatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type PredicateFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Axis-aligned box `[lower, upper]`, used both for control sets and mode domains.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    /// Symmetric box `[-r, r]` per component.
    pub fn symmetric(radius: &[f64]) -> Self {
        Self {
            lower: radius.iter().map(|r| -r).collect(),
            upper: radius.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.len() != self.upper.len()
            || self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(xi, (l, u))| *l <= *xi && *xi <= *u)
    }

    /// Clamp `x` in place; returns true when any component moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (xi, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = xi.clamp(*l, *u);
            if c != *xi {
                moved = true;
                *xi = c;
            }
        }
        moved
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }
}

#[derive(Clone)]
pub struct ModeDef {
    pub name: String,
    pub drift: DriftFn,
    pub input_matrix: InputMatrixFn,
    pub control_box: BoxSet,
    pub domain: BoxSet,
}

impl fmt::Debug for ModeDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModeDef")
            .field("name", &self.name)
            .field("control_box", &self.control_box)
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

/// Guard set `{x : level(x) ≥ 0}` with an optional explicit membership predicate.
#[derive(Clone)]
pub struct GuardDef {
    predicate: Option<PredicateFn>,
    level: ScalarFn,
}

impl GuardDef {
    /// Guard whose membership is exactly `level(x) ≥ 0`.
    pub fn from_level(level: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            predicate: None,
            level: Arc::new(level),
        }
    }

    /// Guard with a separately supplied predicate. The two are expected to
    /// agree; [`HybridAutomaton::validate`] checks this by sampling.
    pub fn with_predicate(
        level: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        predicate: impl Fn(&[f64]) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            predicate: Some(Arc::new(predicate)),
            level: Arc::new(level),
        }
    }

    pub fn level(&self, x: &[f64]) -> f64 {
        (self.level)(x)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.predicate {
            Some(p) => p(x),
            None => self.level(x) >= 0.0,
        }
    }

    pub fn level_fn(&self) -> ScalarFn {
        self.level.clone()
    }
}

impl fmt::Debug for GuardDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuardDef")
            .field("explicit_predicate", &self.predicate.is_some())
            .finish_non_exhaustive()
    }
}

/// Result of evaluating a mode's vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub xdot: Vec<f64>,
    /// The input was outside the control box and got clamped.
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct HybridAutomaton {
    state_dim: usize,
    input_dim: usize,
    modes: Vec<ModeDef>,
    guards: BTreeMap<(usize, usize), GuardDef>,
}

impl HybridAutomaton {
    pub fn new(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_dim,
            input_dim,
            modes: Vec::new(),
            guards: BTreeMap::new(),
        }
    }

    pub fn add_mode(&mut self, mode: ModeDef) -> usize {
        self.modes.push(mode);
        self.modes.len() - 1
    }

    /// Registers the guard for `from → to`, replacing any previous one.
    /// Index validity is reported by [`validate`](Self::validate).
    pub fn add_guard(&mut self, from: usize, to: usize, guard: GuardDef) {
        self.guards.insert((from, to), guard);
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn modes(&self) -> &[ModeDef] {
        &self.modes
    }

    pub fn mode(&self, q: usize) -> &ModeDef {
        &self.modes[q]
    }

    pub fn mode_mut(&mut self, q: usize) -> &mut ModeDef {
        &mut self.modes[q]
    }

    pub fn mode_index(&self, name: &str) -> Option<usize> {
        self.modes.iter().position(|m| m.name == name)
    }

    pub fn guard(&self, from: usize, to: usize) -> Option<&GuardDef> {
        self.guards.get(&(from, to))
    }

    /// Guards leaving `q`, ordered by successor index.
    pub fn outgoing(&self, q: usize) -> impl Iterator<Item = (usize, &GuardDef)> + '_ {
        self.guards
            .range((q, 0)..=(q, usize::MAX))
            .map(|(&(_, to), g)| (to, g))
    }

    /// All mode pairs with a registered guard. This over-approximates the
    /// transitions any particular controller can realise.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.guards.keys().copied().collect()
    }

    /// `f_q(x) + g_q(x) u`, with `u` clamped into the mode's control box.
    pub fn eval_flow(&self, q: usize, x: &[f64], u: &[f64]) -> Result<Flow> {
        let mut xdot = vec![0.0; self.state_dim];
        let mut scratch = vec![0.0; self.state_dim * self.input_dim];
        let clamped = self.eval_flow_into(q, x, u, &mut xdot, &mut scratch)?;
        Ok(Flow { xdot, clamped })
    }

    /// Allocation-free flow evaluation. `g_buf` must hold `n·m` entries.
    /// Returns whether the input was clamped.
    pub fn eval_flow_into(
        &self,
        q: usize,
        x: &[f64],
        u: &[f64],
        xdot: &mut [f64],
        g_buf: &mut [f64],
    ) -> Result<bool> {
        let mode = &self.modes[q];
        let m = self.input_dim;
        let mut clamped = false;
        let mut uc = [0.0f64; 8];
        let uc = &mut uc[..m];
        for (j, (l, h)) in mode
            .control_box
            .lower
            .iter()
            .zip(&mode.control_box.upper)
            .enumerate()
        {
            let v = u[j].clamp(*l, *h);
            clamped |= v != u[j];
            uc[j] = v;
        }
        (mode.drift)(x, xdot);
        (mode.input_matrix)(x, g_buf);
        for (i, xd) in xdot.iter_mut().enumerate() {
            let row = &g_buf[i * m..(i + 1) * m];
            *xd += row.iter().zip(uc.iter()).map(|(g, u)| g * u).sum::<f64>();
        }
        if xdot.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dynamics {
                mode: mode.name.clone(),
                state: x.to_vec(),
            });
        }
        Ok(clamped)
    }

    /// Checks structural invariants and samples guard predicate/level agreement.
    pub fn validate(&self) -> ValidationReport {
        self.validate_with_samples(1000, 0x5eed)
    }

    pub fn validate_with_samples(&self, samples: usize, seed: u64) -> ValidationReport {
        let mut issues = Vec::new();
        if self.state_dim == 0 || self.input_dim == 0 {
            issues.push(ValidationIssue::Dimension(format!(
                "state_dim = {}, input_dim = {}",
                self.state_dim, self.input_dim
            )));
        }
        if self.input_dim > 8 {
            issues.push(ValidationIssue::Dimension(format!(
                "input_dim {} exceeds the supported maximum of 8",
                self.input_dim
            )));
        }
        for mode in &self.modes {
            if mode.control_box.dim() != self.input_dim
                || mode.control_box.upper.len() != self.input_dim
            {
                issues.push(ValidationIssue::Dimension(format!(
                    "control box of mode {} has dimension {}, expected {}",
                    mode.name,
                    mode.control_box.dim(),
                    self.input_dim
                )));
            } else if mode.control_box.is_empty() {
                issues.push(ValidationIssue::EmptyControlBox {
                    mode: mode.name.clone(),
                });
            }
            if mode.domain.dim() != self.state_dim || mode.domain.upper.len() != self.state_dim {
                issues.push(ValidationIssue::Dimension(format!(
                    "domain of mode {} has dimension {}, expected {}",
                    mode.name,
                    mode.domain.dim(),
                    self.state_dim
                )));
            } else if mode.domain.is_empty() {
                issues.push(ValidationIssue::Dimension(format!(
                    "domain of mode {} is empty",
                    mode.name
                )));
            }
        }
        for &(from, to) in self.guards.keys() {
            if from == to || from >= self.modes.len() || to >= self.modes.len() {
                issues.push(ValidationIssue::BadGuardKey { from, to });
            }
        }
        if !issues.is_empty() {
            return ValidationReport { issues };
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (&(from, to), guard) in &self.guards {
            let domain = &self.modes[from].domain;
            let mut x = vec![0.0; self.state_dim];
            for _ in 0..samples {
                for (xi, (l, u)) in x.iter_mut().zip(domain.lower.iter().zip(&domain.upper)) {
                    *xi = if l == u { *l } else { rng.gen_range(*l..=*u) };
                }
                let level = guard.level(&x);
                if guard.contains(&x) != (level >= 0.0) {
                    issues.push(ValidationIssue::GuardDisagreement {
                        from: self.modes[from].name.clone(),
                        to: self.modes[to].name.clone(),
                        witness: x.clone(),
                        level,
                    });
                    break;
                }
            }
        }
        ValidationReport { issues }
    }

    /// Like [`validate`](Self::validate) but fails on the first reported issue.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        match report.issues.first() {
            None => Ok(()),
            Some(issue) => Err(Error::InvalidAutomaton(issue.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValidationIssue {
    Dimension(String),
    EmptyControlBox { mode: String },
    BadGuardKey { from: usize, to: usize },
    GuardDisagreement {
        from: String,
        to: String,
        witness: Vec<f64>,
        level: f64,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            ValidationIssue::EmptyControlBox { mode } => write!(f, "empty control box, mode {mode}"),
            ValidationIssue::BadGuardKey { from, to } => {
                write!(f, "guard ({from}, {to}) does not reference two distinct modes")
            }
            ValidationIssue::GuardDisagreement {
                from,
                to,
                witness,
                level,
            } => write!(
                f,
                "guard {from}->{to}: predicate disagrees with level {level} at {witness:?}"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}
