use hcbf::filter::{filter_qp, HalfspaceConstraint};
use hcbf::model::BoxSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random box-constrained projection with up to four halfspaces.
pub struct Instance {
    pub u_nom: Vec<f64>,
    pub constraints: Vec<HalfspaceConstraint>,
    pub bounds: BoxSet,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.gen_range(1..=2);
    let radius: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..3.0)).collect();
    let bounds = BoxSet::symmetric(&radius);
    // constraints pass near a random interior point so most instances are feasible
    let anchor: Vec<f64> = radius.iter().map(|r| rng.gen_range(-0.8 * r..0.8 * r)).collect();
    let constraints = (0..rng.gen_range(1..=4))
        .map(|_| {
            let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let at: f64 = a.iter().zip(&anchor).map(|(a, x)| a * x).sum();
            HalfspaceConstraint {
                a,
                b: at - rng.gen_range(-0.3..1.0),
            }
        })
        .collect();
    let u_nom = radius.iter().map(|r| rng.gen_range(-1.5 * r..1.5 * r)).collect();
    Instance {
        u_nom,
        constraints,
        bounds,
    }
}

pub fn objective(u: &[f64], u_nom: &[f64]) -> f64 {
    u.iter().zip(u_nom).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn feasible(inst: &Instance, u: &[f64], tol: f64) -> bool {
    inst.bounds.contains(u) && inst.constraints.iter().all(|c| c.slack(u) >= -tol)
}

/// Zooming lattice search over the box: 81 points per axis on a square
/// window centred on the best feasible point. The window shrinks after a round
/// without improvement; the lattice is jittered so it cannot stay aligned
/// with a thin feasible sliver. Until a feasible point turns up the window
/// stays on the whole box, for up to 400 jittered rounds.
pub fn grid_search(inst: &Instance) -> Option<(Vec<f64>, f64)> {
    const N: usize = 81;
    let m = inst.u_nom.len();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (lower, upper) = (&inst.bounds.lower, &inst.bounds.upper);
    let mut width = (0..m).map(|j| upper[j] - lower[j]).fold(0.0, f64::max);
    let mut center: Vec<f64> = (0..m).map(|j| 0.5 * (lower[j] + upper[j])).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for round in 0..3000 {
        if width < 1e-10 {
            break;
        }
        let spacing = width / (N - 1) as f64;
        let jitter: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.5..0.5) * spacing).collect();
        let mut improved = false;
        for flat in 0..N.pow(m as u32) {
            let mut r = flat;
            let u: Vec<f64> = (0..m)
                .map(|j| {
                    let i = r % N;
                    r /= N;
                    let x = center[j] - 0.5 * width + spacing * i as f64 + jitter[j];
                    x.clamp(lower[j], upper[j])
                })
                .collect();
            if !feasible(inst, &u, 0.0) {
                continue;
            }
            let f = objective(&u, &inst.u_nom);
            if best.as_ref().is_none_or(|(_, b)| f < *b) {
                best = Some((u, f));
                improved = true;
            }
        }
        match &best {
            Some((u, _)) => center.clone_from(u),
            None if round >= 400 => return None,
            None => continue,
        }
        if !improved {
            width *= 0.9;
        }
    }
    best
}

/// Outcome of one random instance checked against the lattice search.
pub enum Check {
    Passthrough,
    Infeasible,
    Solved { kkt: f64, gap: f64 },
}

/// Solves instance `i` of the seeded stream and checks it; `Err` names the
/// first violated property.
pub fn check_instance(inst: &Instance, i: usize) -> Result<Check, String> {
    let r = filter_qp(&inst.u_nom, &inst.constraints, &inst.bounds);
    let search = grid_search(inst);
    if !r.feasible {
        if let Some((u, _)) = search {
            let worst = inst.constraints.iter().map(|c| c.slack(&u)).fold(f64::INFINITY, f64::min);
            if worst >= 1e-6 {
                return Err(format!("instance {i}: search found slack {worst} but QP infeasible"));
            }
        }
        return Ok(Check::Infeasible);
    }
    if r.nominal_unchanged {
        if r.u != inst.u_nom {
            return Err(format!("instance {i}: passthrough changed the nominal"));
        }
        return Ok(Check::Passthrough);
    }
    if !(r.kkt_residual <= 1e-8) {
        return Err(format!("instance {i}: kkt {}", r.kkt_residual));
    }
    if !feasible(inst, &r.u, 1e-9) {
        return Err(format!("instance {i}: infeasible point {:?}", r.u));
    }
    let (_, f_grid) = search.ok_or_else(|| format!("instance {i}: QP feasible but search found nothing"))?;
    let f_qp = objective(&r.u, &inst.u_nom);
    if f_qp > f_grid + 1e-9 || f_grid - f_qp > 1e-6 {
        return Err(format!("instance {i}: qp {f_qp} grid {f_grid}"));
    }
    Ok(Check::Solved {
        kkt: r.kkt_residual,
        gap: f_grid - f_qp,
    })
}

/// Runs `count` seeded instances; returns `(solved, infeasible, passthrough)`.
pub fn check_random_instances(count: usize, seed: u64) -> Result<(usize, usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = (0, 0, 0);
    for i in 0..count {
        match check_instance(&random_instance(&mut rng), i)? {
            Check::Solved { .. } => tally.0 += 1,
            Check::Infeasible => tally.1 += 1,
            Check::Passthrough => tally.2 += 1,
        }
    }
    Ok(tally)
}
