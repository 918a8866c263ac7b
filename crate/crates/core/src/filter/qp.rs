//! Minimum-distance projection onto a small polyhedron.
//!
//! Solves `min ½‖u − u_nom‖²  s.t.  a_i·u ≥ b_i` with a dual active-set
//! (Goldfarb–Idnani) iteration specialised to the identity Hessian. Start
//! from the unconstrained minimiser, repeatedly add the most violated
//! constraint, and drop active constraints whose multiplier would turn
//! negative. Rows are normalised to unit length first, so positive row
//! scaling does not change the iterates.

use nalgebra::{DMatrix, DVector};

const MAX_OUTER: usize = 500;
const MAX_INNER: usize = 500;

#[derive(Clone, Debug)]
pub(crate) struct Row {
    pub a: Vec<f64>,
    pub b: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct Projection {
    pub u: Vec<f64>,
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `None` when the rows admit no common point.
pub(crate) fn project(u_nom: &[f64], rows: &[Row], tol: f64) -> Option<Projection> {
    let m = u_nom.len();
    let mut x = u_nom.to_vec();
    let mut active: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();

    for _ in 0..MAX_OUTER {
        let mut worst = -tol;
        let mut p = None;
        for (i, r) in rows.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = dot(&r.a, &x) - r.b;
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            return Some(Projection {
                u: x,
                active,
                multipliers: lam,
            });
        };
        let ap = &rows[p].a;
        let mut lam_p = 0.0;
        let mut added = false;
        for _ in 0..MAX_INNER {
            let q = active.len();
            let (r, z) = if q == 0 {
                (Vec::new(), ap.clone())
            } else {
                let n = DMatrix::from_fn(m, q, |i, j| rows[active[j]].a[i]);
                let ntn = n.transpose() * &n;
                let rhs = n.transpose() * DVector::from_column_slice(ap);
                let r = ntn.cholesky()?.solve(&rhs);
                let z = DVector::from_column_slice(ap) - &n * &r;
                (r.iter().copied().collect(), z.iter().copied().collect::<Vec<_>>())
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 1e-12 {
                    let t = lam[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let zz = dot(&z, &z);
            let t2 = if zz > 1e-20 {
                (rows[p].b - dot(ap, &x)) / zz
            } else {
                f64::INFINITY
            };
            if !t1.is_finite() && !t2.is_finite() {
                return None;
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += t * zi;
                }
            }
            for (l, rj) in lam.iter_mut().zip(&r) {
                *l = (*l - t * rj).max(0.0);
            }
            lam_p += t;
            if t2 <= t1 {
                active.push(p);
                lam.push(lam_p);
                added = true;
                break;
            }
            let k = drop.expect("finite dual step has a blocking index");
            active.remove(k);
            lam.remove(k);
        }
        if !added {
            return None;
        }
    }
    None
}
