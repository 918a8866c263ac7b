//! Adaptive cruise control on a road that turns from dry to icy at a fixed
//! position.
//!
//! State `(p, v, d)`: ego position, ego speed and gap to a lead car driving
//! at constant speed `v0`. Input is the wheel force `u`.
//!
//! ```text
//! ṗ = v,   v̇ = (u − Fr(v)) / m,   ḋ = v0 − v,   |u| ≤ c·m·g
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{CbfDef, NominalFn};
use crate::grid::{Axis, Grid};
use crate::model::{BoxSet, GuardDef, HybridAutomaton, ModeDef};
use crate::reach::ReachSettings;
use crate::sim::SimSettings;

/// Rolling resistance `f0 v² + f1 v + f2` (N).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Friction {
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
}

impl Friction {
    pub fn force(&self, v: f64) -> f64 {
        self.f0 * v * v + self.f1 * v + self.f2
    }

    fn scaled(self, k: f64) -> Self {
        Self {
            f0: self.f0 * k,
            f1: self.f1 * k,
            f2: self.f2 * k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccParams {
    pub m: f64,
    pub g: f64,
    pub v0: f64,
    pub v_d: f64,
    pub t_h: f64,
    pub c_dry: f64,
    pub c_ice: f64,
    pub friction_dry: Friction,
    pub friction_ice: Friction,
    pub guard_position: f64,
    /// Speed-tracking gain of the nominal controller (1/s).
    pub k_p: f64,
    /// CBF coefficient used online.
    pub gamma: f64,
    /// Coefficient of the class-K function under which the refined CBF's
    /// input sets are checked for emptiness. The refined field is only
    /// Lipschitz, and near its kinks the linearized condition needs a steeper
    /// function than the online one. Sets for a larger coefficient contain
    /// those for `gamma`, so the online filter stays a valid selection.
    pub certify_gamma: f64,
    /// Initial `(p, v, d)`.
    pub x0: [f64; 3],
    /// Refinement grid: per axis `(count, lower, upper)` for `p`, `v`, `d`.
    pub grid: [(usize, f64, f64); 3],
}

impl Default for AccParams {
    fn default() -> Self {
        let dry = Friction {
            f0: 0.1,
            f1: 5.0,
            f2: 0.25,
        };
        Self {
            m: 1650.0,
            g: 9.81,
            v0: 13.89,
            v_d: 24.0,
            t_h: 1.8,
            c_dry: 0.3,
            c_ice: 0.1,
            friction_dry: dry,
            friction_ice: dry.scaled(0.4),
            guard_position: 100.0,
            k_p: 1.0,
            gamma: 1.0,
            certify_gamma: 10.0,
            x0: [0.0, 18.0, 60.0],
            grid: [(121, 0.0, 120.0), (71, 0.0, 35.0), (101, 0.0, 100.0)],
        }
    }
}

impl AccParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("acc: {m}")));
        if !(self.c_ice < self.c_dry) {
            return bad("c_ice must be smaller than c_dry");
        }
        if !(self.v_d > self.v0) {
            return bad("v_d must exceed v0");
        }
        if !(self.m > 0.0 && self.g > 0.0 && self.t_h >= 0.0 && self.c_ice > 0.0) {
            return bad("m, g, c_ice must be positive and t_h nonnegative");
        }
        if !(self.gamma >= 0.0 && self.certify_gamma >= self.gamma && self.k_p >= 0.0) {
            return bad("gamma and k_p must be nonnegative and certify_gamma at least gamma");
        }
        Ok(())
    }

    /// `h = d − T_h v − (v0 − v)² / (2 c g)`.
    pub fn cbf_value(&self, c: f64, x: &[f64]) -> f64 {
        let dv = self.v0 - x[1];
        x[2] - self.t_h * x[1] - dv * dv / (2.0 * c * self.g)
    }

    pub fn cbf_gradient(&self, c: f64, x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -self.t_h + (self.v0 - x[1]) / (c * self.g);
        out[2] = 1.0;
    }

    /// The unsafe headway region is `c(x) = d − T_h v < 0`.
    pub fn headway(&self, x: &[f64]) -> f64 {
        x[2] - self.t_h * x[1]
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.iter().map(|(n, l, u)| Axis::new(*n, *l, *u)).collect())
    }

    pub fn default_reach() -> ReachSettings {
        ReachSettings {
            dt: 0.1,
            gamma: 1.0,
            control_samples: 3,
            convergence_tol: 1e-6,
            max_iters: 5000,
            control_margin: 0.15,
        }
    }
}

pub const DRY: usize = 0;
pub const ICE: usize = 1;

pub struct Acc {
    pub params: AccParams,
    pub automaton: Arc<HybridAutomaton>,
    /// Local CBFs `[h_dry, h_ice]`.
    pub local: Vec<CbfDef>,
    /// `h_ice` holds for both surfaces because the dry box contains the icy one
    /// and icy friction is lower.
    pub global: CbfDef,
    pub nominal: NominalFn,
}

fn mode(p: &AccParams, name: &str, c: f64, fr: Friction, domain: BoxSet) -> ModeDef {
    let (m, v0) = (p.m, p.v0);
    ModeDef {
        name: name.into(),
        drift: Arc::new(move |x, out| {
            out[0] = x[1];
            out[1] = -fr.force(x[1]) / m;
            out[2] = v0 - x[1];
        }),
        input_matrix: Arc::new(move |_x, out| {
            out[0] = 0.0;
            out[1] = 1.0 / m;
            out[2] = 0.0;
        }),
        control_box: BoxSet::symmetric(&[c * m * p.g]),
        domain,
    }
}

fn cbf(p: &AccParams, name: &str, c: f64) -> CbfDef {
    let (a, b) = (p.clone(), p.clone());
    CbfDef::analytic(
        name,
        p.gamma,
        move |x| a.cbf_value(c, x),
        move |x, out| b.cbf_gradient(c, x, out),
    )
}

pub fn build_acc(params: AccParams) -> Result<Acc> {
    params.validate()?;
    let grid = params.grid()?;
    let lo: Vec<f64> = grid.axes().iter().map(|a| a.lower).collect();
    let hi: Vec<f64> = grid.axes().iter().map(|a| a.upper).collect();
    let ice_domain = BoxSet::new(
        vec![lo[0], -5.0, -100.0],
        vec![hi[0].max(params.guard_position) + 2000.0, hi[1] + 10.0, 1000.0],
    );
    let mut h = HybridAutomaton::new(3, 1);
    h.add_mode(mode(&params, "dry", params.c_dry, params.friction_dry, BoxSet::new(lo, hi)));
    h.add_mode(mode(&params, "ice", params.c_ice, params.friction_ice, ice_domain));
    let gp = params.guard_position;
    h.add_guard(DRY, ICE, GuardDef::from_level(move |x| x[0] - gp));
    h.ensure_valid()?;

    let local = vec![cbf(&params, "h_dry", params.c_dry), cbf(&params, "h_ice", params.c_ice)];
    let global = cbf(&params, "h_global", params.c_ice);
    let automaton = Arc::new(h);
    let (k_p, v_d, m) = (params.k_p, params.v_d, params.m);
    let boxes: Vec<BoxSet> = automaton.modes().iter().map(|m| m.control_box.clone()).collect();
    let nominal: NominalFn = Arc::new(move |q, _t, x| {
        let mut u = vec![k_p * (v_d - x[1]) * m];
        boxes[q].clamp(&mut u);
        u
    });
    Ok(Acc {
        params,
        automaton,
        local,
        global,
        nominal,
    })
}

pub fn default_sim() -> SimSettings {
    SimSettings {
        dt: 1e-3,
        horizon: 25.0,
    }
}
