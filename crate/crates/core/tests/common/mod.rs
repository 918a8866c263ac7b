#![allow(dead_code)]

pub mod qp;

use std::sync::Arc;

use hcbf::grid::{Axis, Grid, ImplicitSet};
use hcbf::model::{BoxSet, GuardDef, HybridAutomaton, ModeDef};
use hcbf::reach::ReachSettings;

/// Double integrator `ṗ = v, v̇ = u, |u| ≤ 1` on `[0,10] × [0,5]`, switching
/// at `p = 10` into a mode whose safe set is `v ≤ 2`.
pub struct DoubleIntegrator {
    pub automaton: HybridAutomaton,
    pub grid: Grid,
    pub safe_from: ImplicitSet,
    pub safe_to: ImplicitSet,
}

pub fn double_integrator(nodes: usize) -> DoubleIntegrator {
    let mut h = HybridAutomaton::new(2, 1);
    for name in ["before", "after"] {
        h.add_mode(ModeDef {
            name: name.into(),
            drift: Arc::new(|x, out| {
                out[0] = x[1];
                out[1] = 0.0;
            }),
            input_matrix: Arc::new(|_x, out| {
                out[0] = 0.0;
                out[1] = 1.0;
            }),
            control_box: BoxSet::symmetric(&[1.0]),
            domain: BoxSet::new(vec![0.0, 0.0], vec![10.0, 5.0]),
        });
    }
    h.add_guard(0, 1, GuardDef::from_level(|x| x[0] - 10.0));
    DoubleIntegrator {
        automaton: h,
        grid: Grid::new(vec![Axis::new(nodes, 0.0, 10.0), Axis::new(nodes, 0.0, 5.0)]).unwrap(),
        safe_from: ImplicitSet::analytic(|_| 5.0),
        safe_to: ImplicitSet::analytic(|x| 2.0 - x[1]),
    }
}

pub fn di_reach(gamma: f64) -> ReachSettings {
    ReachSettings {
        dt: 0.05,
        gamma,
        control_samples: 3,
        convergence_tol: 1e-8,
        max_iters: 20_000,
        control_margin: 0.0,
    }
}

/// Max braking reaches `p = 10` faster than 2 exactly when
/// `v² − 2(10 − p) > 4`.
pub fn closed_form_inevitable(p: f64, v: f64) -> bool {
    v * v - 2.0 * (10.0 - p) > 4.0
}

const HOLD: f64 = 0.5;
const DEPTH: usize = 10;

/// Earliest `t ∈ [0, h]` with `p + v t + u t²/2 ≥ 10`.
fn crossing(p: f64, v: f64, u: f64, h: f64) -> Option<f64> {
    if p >= 10.0 {
        return Some(0.0);
    }
    let (a, b, c) = (0.5 * u, v, p - 10.0);
    let mut roots = Vec::new();
    if a.abs() < 1e-15 {
        if b.abs() > 1e-15 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            roots.push((-b - s) / (2.0 * a));
            roots.push((-b + s) / (2.0 * a));
        }
    }
    roots
        .into_iter()
        .filter(|t| (0.0..=h).contains(t))
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))))
}

/// Brute force over piecewise-constant `u ∈ {−1, +1}` held for 0.5 s, up to
/// ten holds: true when every sequence reaches `p = 10` with `v > 2`.
pub fn bang_bang_inevitable(p: f64, v: f64) -> bool {
    fn all_reach(p: f64, v: f64, depth: usize) -> bool {
        if depth == 0 {
            return false;
        }
        for u in [-1.0, 1.0] {
            match crossing(p, v, u, HOLD) {
                Some(t) => {
                    if v + u * t <= 2.0 {
                        return false;
                    }
                }
                None => {
                    let (p1, v1) = (p + v * HOLD + 0.5 * u * HOLD * HOLD, v + u * HOLD);
                    if !all_reach(p1, v1, depth - 1) {
                        return false;
                    }
                }
            }
        }
        true
    }
    all_reach(p, v, DEPTH)
}

/// Hausdorff distance between two node sets, in cells.
pub fn hausdorff_cells(grid: &Grid, a: &[bool], b: &[bool]) -> f64 {
    let count = |s: &[bool]| s.iter().filter(|x| **x).count();
    match (count(a), count(b)) {
        (0, 0) => return 0.0,
        (0, _) | (_, 0) => return f64::INFINITY,
        _ => {}
    }
    let n = grid.ndim();
    let index = |k: usize| {
        let mut i = vec![0; n];
        grid.multi_index(k, &mut i);
        i
    };
    let directed = |from: &[bool], to: &[bool]| {
        let targets: Vec<Vec<usize>> = (0..grid.len()).filter(|k| to[*k]).map(index).collect();
        (0..grid.len())
            .filter(|k| from[*k] && !to[*k])
            .map(|k| {
                let i = index(k);
                targets
                    .iter()
                    .map(|j| {
                        i.iter()
                            .zip(j)
                            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Nodes with a 2-D neighbour (including diagonals) of different membership.
pub fn boundary_nodes(grid: &Grid, set: &[bool]) -> Vec<bool> {
    let dims: Vec<usize> = grid.axes().iter().map(|a| a.count).collect();
    assert_eq!(dims.len(), 2);
    let mut out = vec![false; grid.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            let k = grid.flat_index(&[i, j]);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a < 0 || b < 0 || a >= dims[0] as i64 || b >= dims[1] as i64 {
                        continue;
                    }
                    if set[grid.flat_index(&[a as usize, b as usize])] != set[k] {
                        out[k] = true;
                    }
                }
            }
        }
    }
    out
}

/// Rotation `ẋ = ω(−y, x)` in both modes; `a → b` when `y ≥ level`,
/// `b → a` when `y ≤ −level`.
pub fn rotation(omega: f64, level: f64) -> HybridAutomaton {
    let mut h = HybridAutomaton::new(2, 1);
    for name in ["a", "b"] {
        h.add_mode(ModeDef {
            name: name.into(),
            drift: Arc::new(move |x, out| {
                out[0] = -omega * x[1];
                out[1] = omega * x[0];
            }),
            input_matrix: Arc::new(|_x, out| out.fill(0.0)),
            control_box: BoxSet::symmetric(&[1.0]),
            domain: BoxSet::new(vec![-2.0, -2.0], vec![2.0, 2.0]),
        });
    }
    h.add_guard(0, 1, GuardDef::from_level(move |x| x[1] - level));
    h.add_guard(1, 0, GuardDef::from_level(move |x| -level - x[1]));
    h
}

pub fn node_mask(grid: &Grid, f: impl Fn(&[f64]) -> bool) -> Vec<bool> {
    (0..grid.len()).map(|k| f(&grid.node_vec(k))).collect()
}
