mod common;

use common::*;
use hcbf::grid::switching_sets;
use hcbf::reach::{compute_back_unsafe, refine_cbf};

#[test]
fn bang_bang_oracle_agrees_with_stopping_analysis() {
    assert!(bang_bang_inevitable(8.0, 3.0));
    assert!(!bang_bang_inevitable(8.0, 2.5));
    assert!(bang_bang_inevitable(10.0, 2.1));
    assert!(!bang_bang_inevitable(10.0, 1.9));
    let mut disagreements = 0;
    for i in 0..=40 {
        for j in 0..=40 {
            let (p, v) = (i as f64 * 0.25, j as f64 * 0.125);
            let margin = v * v - 2.0 * (10.0 - p) - 4.0;
            if margin.abs() > 1e-9 && bang_bang_inevitable(p, v) != closed_form_inevitable(p, v) {
                disagreements += 1;
            }
        }
    }
    assert_eq!(disagreements, 0);
}

#[test]
fn hausdorff_of_shifted_sets() {
    let di = double_integrator(11);
    let a = node_mask(&di.grid, |x| x[0] <= 3.0);
    let b = node_mask(&di.grid, |x| x[0] <= 5.0);
    assert!((hausdorff_cells(&di.grid, &a, &b) - 2.0).abs() < 1e-12);
    assert_eq!(hausdorff_cells(&di.grid, &a, &a), 0.0);
}

#[test]
fn known_states_in_and_out_of_the_backward_set() {
    let di = double_integrator(101);
    let sets = switching_sets(&di.automaton, 0, 1, &di.safe_from, &di.safe_to, &di.grid).unwrap();
    let bu = compute_back_unsafe(&di.automaton, &sets, &di_reach(1.0)).unwrap();
    assert!(bu.converged);
    assert!(bu.value.interpolate(&[8.0, 3.0]) > 0.0);
    assert!(bu.value.interpolate(&[8.0, 2.5]) < 0.0);
}

#[test]
fn backward_set_matches_closed_form_and_brute_force() {
    let di = double_integrator(101);
    let sets = switching_sets(&di.automaton, 0, 1, &di.safe_from, &di.safe_to, &di.grid).unwrap();
    let bu = compute_back_unsafe(&di.automaton, &sets, &di_reach(1.0)).unwrap();
    let grid = &di.grid;
    let computed: Vec<bool> = bu.value.values().iter().map(|v| *v > 0.0).collect();
    let exact = node_mask(grid, |x| closed_form_inevitable(x[0], x[1]));
    let h = hausdorff_cells(grid, &computed, &exact);
    assert!(h <= 2.0, "Hausdorff {h} cells");

    let brute = node_mask(grid, |x| bang_bang_inevitable(x[0], x[1]));
    let edge = boundary_nodes(grid, &brute);
    let off: Vec<usize> = (0..grid.len())
        .filter(|k| !edge[*k] && computed[*k] != brute[*k])
        .collect();
    assert!(off.is_empty(), "{} interior mismatches, first at {:?}", off.len(), grid.node_vec(off[0]));
}

#[test]
fn refined_kernel_is_the_complement_of_the_backward_set() {
    let di = double_integrator(101);
    let sets = switching_sets(&di.automaton, 0, 1, &di.safe_from, &di.safe_to, &di.grid).unwrap();
    let settings = di_reach(1.0);
    let bu = compute_back_unsafe(&di.automaton, &sets, &settings).unwrap();
    let refined = refine_cbf(&di.automaton, 0, 1, &di.safe_from, &bu.value, &settings).unwrap();
    assert!(!refined.no_safe_switching);
    let kernel: Vec<bool> = refined.value.values().iter().map(|v| *v >= 0.0).collect();
    let exact = node_mask(&di.grid, |x| !closed_form_inevitable(x[0], x[1]));
    let h = hausdorff_cells(&di.grid, &kernel, &exact);
    assert!(h <= 2.0, "Hausdorff {h} cells");
}

#[test]
fn refined_kernel_does_not_depend_on_gamma() {
    let di = double_integrator(101);
    let sets = switching_sets(&di.automaton, 0, 1, &di.safe_from, &di.safe_to, &di.grid).unwrap();
    let kernels: Vec<Vec<bool>> = [0.1, 1.0, 5.0]
        .into_iter()
        .map(|gamma| {
            let settings = di_reach(gamma);
            let bu = compute_back_unsafe(&di.automaton, &sets, &settings).unwrap();
            let r = refine_cbf(&di.automaton, 0, 1, &di.safe_from, &bu.value, &settings).unwrap();
            r.value.values().iter().map(|v| *v >= 0.0).collect()
        })
        .collect();
    for a in &kernels {
        for b in &kernels {
            let h = hausdorff_cells(&di.grid, a, b);
            assert!(h <= 1.0, "Hausdorff {h} cells");
        }
    }
}

#[test]
fn a_single_integrator_can_always_back_away() {
    use hcbf::grid::{Axis, Grid, ImplicitSet};
    use hcbf::model::{BoxSet, GuardDef, HybridAutomaton, ModeDef};
    use std::sync::Arc;

    let mut h = HybridAutomaton::new(1, 1);
    for name in ["a", "b"] {
        h.add_mode(ModeDef {
            name: name.into(),
            drift: Arc::new(|_x, out| out[0] = 0.0),
            input_matrix: Arc::new(|_x, out| out[0] = 1.0),
            control_box: BoxSet::symmetric(&[1.0]),
            domain: BoxSet::new(vec![0.0], vec![10.0]),
        });
    }
    h.add_guard(0, 1, GuardDef::from_level(|x| x[0] - 9.0));
    let grid = Grid::new(vec![Axis::new(201, 0.0, 10.0)]).unwrap();
    let everything = ImplicitSet::analytic(|_| 1.0);
    let nothing = ImplicitSet::analytic(|_| -1.0);
    let sets = switching_sets(&h, 0, 1, &everything, &nothing, &grid).unwrap();
    let bu = compute_back_unsafe(&h, &sets, &di_reach(1.0)).unwrap();
    for k in 0..grid.len() {
        let x = grid.node_vec(k)[0];
        // brute force over the two extreme inputs: u = −1 moves away from the guard
        let escapes = x < 9.0;
        assert_eq!(bu.value.values()[k] >= 0.0, !escapes, "x = {x}");
    }
}
