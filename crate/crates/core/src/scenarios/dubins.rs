//! Dubins car crossing from a dry to a wet surface among box obstacles.
//!
//! State `(x, y, v, θ)`, input `(a, ω)`:
//!
//! ```text
//! ẋ = v cos θ,   ẏ = v sin θ,   v̇ = a,   θ̇ = ω
//! ```
//!
//! The surface is dry for `x` below the boundary abscissa and wet beyond it.
//! Local CBFs subtract the braking distance `v² / (2 a_max)` of the surface
//! from the obstacle clearance.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{CbfDef, NominalFn};
use crate::grid::{Axis, Grid};
use crate::model::{BoxSet, GuardDef, HybridAutomaton, ModeDef};
use crate::reach::ReachSettings;
use crate::sim::SimSettings;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Obstacle {
    /// Signed distance from `(x, y)`, negative inside, with its gradient.
    pub fn signed_distance(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let p = [x, y];
        let mut outside = [0.0; 2];
        for i in 0..2 {
            outside[i] = if p[i] < self.lower[i] {
                p[i] - self.lower[i]
            } else if p[i] > self.upper[i] {
                p[i] - self.upper[i]
            } else {
                0.0
            };
        }
        let d = outside[0].hypot(outside[1]);
        if d > 0.0 {
            return (d, [outside[0] / d, outside[1] / d]);
        }
        // inside: distance to the nearest face
        let mut best = (f64::INFINITY, [0.0; 2]);
        for i in 0..2 {
            for (face, sign) in [(self.lower[i], -1.0), (self.upper[i], 1.0)] {
                let depth = (p[i] - face).abs();
                if depth < best.0 {
                    let mut g = [0.0; 2];
                    g[i] = sign;
                    best = (depth, g);
                }
            }
        }
        (-best.0, best.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DubinsParams {
    pub boundary: f64,
    /// `[a, ω]` bounds, symmetric about zero.
    pub dry_box: [f64; 2],
    pub wet_box: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    /// Buffer the CBFs keep around every obstacle. A stopped car facing an
    /// obstacle chatters around `v = 0` under the sampled filter and creeps
    /// forward slowly; the buffer absorbs that creep.
    pub obstacle_margin: f64,
    pub goal: [f64; 2],
    pub desired_speed: f64,
    /// Speed and heading gains of the pure-pursuit controller.
    pub k_v: f64,
    pub k_theta: f64,
    pub gamma: f64,
    /// Class-K coefficient for the input-set check, as for the ACC scenario.
    pub certify_gamma: f64,
    pub x0: [f64; 4],
    pub workspace: [f64; 4],
    /// Nodes along `x`, `y`, `v`, `θ`.
    pub grid_nodes: [usize; 4],
    pub v_max: f64,
}

impl Default for DubinsParams {
    fn default() -> Self {
        Self {
            boundary: 5.0,
            dry_box: [2.0, 2.0],
            wet_box: [0.25, 1.0],
            obstacles: vec![
                Obstacle {
                    lower: [5.6, 4.4],
                    upper: [6.6, 5.6],
                },
                Obstacle {
                    lower: [2.5, 7.0],
                    upper: [3.5, 8.0],
                },
            ],
            obstacle_margin: 0.05,
            goal: [9.0, 5.0],
            desired_speed: 1.5,
            k_v: 2.0,
            k_theta: 2.0,
            gamma: 1.0,
            certify_gamma: 10.0,
            x0: [1.0, 5.0, 0.0, 0.0],
            workspace: [0.0, 10.0, 0.0, 10.0],
            grid_nodes: [51, 51, 21, 25],
            v_max: 2.0,
        }
    }
}

impl DubinsParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dubins: {m}")));
        if self.wet_box.iter().zip(&self.dry_box).any(|(w, d)| !(*w > 0.0 && w <= d)) {
            return bad("wet control box must be nonempty and inside the dry one");
        }
        if self.obstacles.is_empty() {
            return bad("at least one obstacle is required");
        }
        if self.obstacles.iter().any(|o| !(o.lower[0] < o.upper[0] && o.lower[1] < o.upper[1])) {
            return bad("obstacle boxes need lower < upper");
        }
        if !(self.obstacle_margin >= 0.0) {
            return bad("obstacle_margin must be nonnegative");
        }
        if !(self.gamma >= 0.0 && self.certify_gamma >= self.gamma) {
            return bad("gamma must be nonnegative and certify_gamma at least gamma");
        }
        if !(self.desired_speed > 0.0 && self.desired_speed <= self.v_max) {
            return bad("desired_speed must lie in (0, v_max]");
        }
        let [x0, x1, y0, y1] = self.workspace;
        if !(x0 < self.boundary && self.boundary < x1 && y0 < y1) {
            return bad("boundary must split the workspace");
        }
        Ok(())
    }

    /// Minimum signed clearance to all obstacles.
    pub fn clearance(&self, x: f64, y: f64) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(x, y).0)
            .fold(f64::INFINITY, f64::min)
    }

    /// `min_i sd_i(x, y) − margin − v² / (2 a_max)`.
    pub fn cbf_value(&self, a_max: f64, s: &[f64]) -> f64 {
        self.clearance(s[0], s[1]) - self.obstacle_margin - s[2] * s[2] / (2.0 * a_max)
    }

    pub fn cbf_gradient(&self, a_max: f64, s: &[f64], out: &mut [f64]) {
        let mut best = (f64::INFINITY, [0.0; 2]);
        for o in &self.obstacles {
            let sd = o.signed_distance(s[0], s[1]);
            if sd.0 < best.0 {
                best = sd;
            }
        }
        out[0] = best.1[0];
        out[1] = best.1[1];
        out[2] = -s[2] / a_max;
        out[3] = 0.0;
    }

    pub fn grid(&self) -> Result<Grid> {
        let [x0, x1, y0, y1] = self.workspace;
        let n = self.grid_nodes;
        Grid::new(vec![
            Axis::new(n[0], x0, x1),
            Axis::new(n[1], y0, y1),
            Axis::new(n[2], 0.0, self.v_max),
            Axis::periodic(n[3], -PI, PI),
        ])
    }

    pub fn default_reach() -> ReachSettings {
        ReachSettings {
            dt: 0.1,
            gamma: 1.0,
            control_samples: 3,
            convergence_tol: 1e-6,
            max_iters: 5000,
            control_margin: 0.0,
        }
    }
}

pub const DRY: usize = 0;
pub const WET: usize = 1;

pub struct Dubins {
    pub params: DubinsParams,
    pub automaton: Arc<HybridAutomaton>,
    /// `[h_dry, h_wet]`.
    pub local: Vec<CbfDef>,
    pub nominal: NominalFn,
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn mode(name: &str, bounds: [f64; 2], domain: BoxSet) -> ModeDef {
    ModeDef {
        name: name.into(),
        drift: Arc::new(|s, out| {
            out[0] = s[2] * s[3].cos();
            out[1] = s[2] * s[3].sin();
            out[2] = 0.0;
            out[3] = 0.0;
        }),
        input_matrix: Arc::new(|_s, out| {
            out.fill(0.0);
            out[4] = 1.0;
            out[7] = 1.0;
        }),
        control_box: BoxSet::symmetric(&bounds),
        domain,
    }
}

pub fn build_dubins(params: DubinsParams) -> Result<Dubins> {
    params.validate()?;
    let [x0, x1, y0, y1] = params.workspace;
    let domain = BoxSet::new(
        vec![x0, y0, -0.5, -100.0],
        vec![x1, y1, params.v_max + 0.5, 100.0],
    );
    let mut h = HybridAutomaton::new(4, 2);
    h.add_mode(mode("dry", params.dry_box, domain.clone()));
    h.add_mode(mode("wet", params.wet_box, domain));
    let b = params.boundary;
    h.add_guard(DRY, WET, GuardDef::from_level(move |s| s[0] - b));
    h.ensure_valid()?;

    let local = [("h_dry", params.dry_box[0]), ("h_wet", params.wet_box[0])]
        .into_iter()
        .map(|(name, a_max)| {
            let (p1, p2) = (params.clone(), params.clone());
            CbfDef::analytic(
                name,
                params.gamma,
                move |s| p1.cbf_value(a_max, s),
                move |s, out| p2.cbf_gradient(a_max, s, out),
            )
        })
        .collect();

    let automaton = Arc::new(h);
    let p = params.clone();
    let boxes: Vec<BoxSet> = automaton.modes().iter().map(|m| m.control_box.clone()).collect();
    let nominal: NominalFn = Arc::new(move |q, _t, s| {
        let (dx, dy) = (p.goal[0] - s[0], p.goal[1] - s[1]);
        let dist = dx.hypot(dy);
        let v_ref = p.desired_speed.min(p.k_v * dist);
        let heading = wrap_angle(dy.atan2(dx) - s[3]);
        let mut u = vec![p.k_v * (v_ref - s[2]), p.k_theta * heading];
        boxes[q].clamp(&mut u);
        u
    });
    Ok(Dubins {
        params,
        automaton,
        local,
        nominal,
    })
}

pub fn default_sim() -> SimSettings {
    SimSettings {
        dt: 1e-2,
        horizon: 20.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn far_from_obstacles_both_cbfs_are_positive() {
        let d = build_dubins(DubinsParams::default()).unwrap();
        let s = [1.0, 1.0, 0.5, 0.0];
        assert!(d.local.iter().all(|h| h.value(&s) > 0.0));
    }

    #[test]
    fn obstacle_center_is_unsafe() {
        let d = build_dubins(DubinsParams::default()).unwrap();
        let s = [6.1, 5.0, 0.0, 0.0];
        assert!(d.local.iter().all(|h| h.value(&s) < 0.0));
        assert_abs_diff_eq!(d.local[0].value(&s), -0.5 - d.params.obstacle_margin, epsilon = 1e-12);
    }

    #[test]
    fn wet_margin_is_smaller_at_speed() {
        let d = build_dubins(DubinsParams::default()).unwrap();
        let s = [4.9, 5.0, 1.5, 0.0];
        let (dry, wet) = (d.local[DRY].value(&s), d.local[WET].value(&s));
        assert!(wet < dry, "{wet} {dry}");
        assert!(dry >= 0.0 && wet < 0.0);
    }

    #[test]
    fn signed_distance_gradients() {
        let o = Obstacle {
            lower: [0.0, 0.0],
            upper: [1.0, 1.0],
        };
        let (d, g) = o.signed_distance(2.0, 2.0);
        assert_abs_diff_eq!(d, 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], g[1], epsilon = 1e-12);
        let (d, g) = o.signed_distance(0.9, 0.5);
        assert_abs_diff_eq!(d, -0.1, epsilon = 1e-12);
        assert_eq!(g, [1.0, 0.0]);
    }

    #[test]
    fn wet_box_must_fit_inside_dry_box() {
        let p = DubinsParams {
            wet_box: [3.0, 1.0],
            ..Default::default()
        };
        assert!(matches!(build_dubins(p), Err(Error::Config(_))));
    }

    #[test]
    fn pure_pursuit_points_at_the_goal() {
        let d = build_dubins(DubinsParams::default()).unwrap();
        let u = (d.nominal)(DRY, 0.0, &[1.0, 5.0, 0.0, 0.0]);
        assert!(u[0] > 0.0);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-12);
        let u = (d.nominal)(DRY, 0.0, &[1.0, 5.0, 1.0, 1.0]);
        assert!(u[1] < 0.0);
    }
}
