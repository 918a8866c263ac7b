use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use hcbf::filter::Policy;
use hcbf::grid::{load_grid, save_grid, GridFn};
use hcbf::reach::synthesize_transition;
use hcbf::scenarios::{run_comparison, PolicyOutcome, PolicyRun, Scenario, ScenarioSpec};
use hcbf::sim::{run_hybrid, OpenLoop, PreconditionReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{transition_names, ScenarioConfig};
use crate::{plot, CliError};

/// A loaded configuration plus the command-line context it runs in.
pub struct Run {
    pub cfg: ScenarioConfig,
    /// How the config was named on the command line, for hints in messages.
    pub label: String,
    pub out: PathBuf,
    pub force: bool,
    pub seed: Option<u64>,
}

impl Run {
    pub fn new(cfg: ScenarioConfig, label: impl Into<String>, out: Option<PathBuf>) -> Self {
        let out = out
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out").join(cfg.study.key()));
        Self {
            cfg,
            label: label.into(),
            out,
            force: false,
            seed: None,
        }
    }

    fn scenario(&self) -> Result<Scenario, CliError> {
        Ok(self.cfg.study.build()?)
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))
            .map_err(CliError::Failed)
    }
}

/// `"dry->ice"` becomes `"dry_ice"` in file names.
fn stem(key: &str) -> String {
    key.replace("->", "_")
}

const KINDS: [(&str, &str); 4] = [
    ("S_", "safe switching set"),
    ("U_", "unsafe switching set"),
    ("backunsafe_", "unsafe backward set"),
    ("h_", "refined CBF"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub transition: String,
    pub content_hash: String,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    pub converged: bool,
    pub no_safe_switching: bool,
    pub nonnegative_nodes: usize,
    pub nodes: usize,
    pub seconds: f64,
}

fn sidecar_path(grid: &Path) -> PathBuf {
    grid.with_extension("json")
}

fn read_sidecar(grid: &Path) -> Option<Sidecar> {
    let text = fs::read_to_string(sidecar_path(grid)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::Failed)
}

/// Per-transition result of `refine`.
#[derive(Clone, Debug)]
pub struct RefineEntry {
    pub transition: String,
    pub cached: bool,
    pub provided: bool,
    pub converged: bool,
    pub no_safe_switching: bool,
}

/// Switching sets, backward set and refined CBF for every transition, each
/// saved with a JSON sidecar. A transition whose artifacts carry the current
/// content hash is skipped unless `force` is set.
pub fn refine(run: &Run) -> Result<Vec<RefineEntry>, CliError> {
    let sc = run.scenario()?;
    let reach = run.cfg.reach();
    let hash = run.cfg.content_hash();
    run.ensure_out()?;
    let mut entries = Vec::new();
    for ((from, to), key) in transition_names(&sc) {
        if let Some(path) = run.cfg.grids.get(&key) {
            log::info!("{key}: using provided grid {}", path.display());
            entries.push(RefineEntry {
                transition: key,
                cached: false,
                provided: true,
                converged: true,
                no_safe_switching: false,
            });
            continue;
        }
        let files: Vec<PathBuf> = KINDS
            .iter()
            .map(|(prefix, _)| run.out.join(format!("{prefix}{}.hcbf", stem(&key))))
            .collect();
        if !run.force {
            let cars: Vec<Option<Sidecar>> = files
                .iter()
                .map(|f| read_sidecar(f).filter(|s| f.is_file() && s.content_hash == hash))
                .collect();
            if let Some(cars) = cars.into_iter().collect::<Option<Vec<_>>>() {
                log::info!("{key}: cache hit, content hash {} matches", &hash[..12]);
                let h = &cars[3];
                entries.push(RefineEntry {
                    transition: key,
                    cached: true,
                    provided: false,
                    converged: cars.iter().all(|c| c.converged),
                    no_safe_switching: h.no_safe_switching,
                });
                continue;
            }
        }
        log::info!("{key}: refining on {} nodes", sc.grid.len());
        let t = Instant::now();
        let syn = synthesize_transition(
            &sc.automaton,
            from,
            to,
            &sc.local[from].as_set(),
            &sc.local[to].as_set(),
            &sc.grid,
            &reach,
        )?;
        let seconds = t.elapsed().as_secs_f64();
        let fields: [(&GridFn, Option<usize>, Option<f64>, bool); 4] = [
            (&syn.sets.safe, None, None, true),
            (&syn.sets.unsafe_set, None, None, true),
            (
                &syn.back_unsafe.value,
                Some(syn.back_unsafe.iterations),
                Some(syn.back_unsafe.residual),
                syn.back_unsafe.converged,
            ),
            (
                &syn.refined.value,
                Some(syn.refined.iterations),
                Some(syn.refined.residual),
                syn.refined.converged,
            ),
        ];
        for ((field, iterations, residual, converged), (path, (_, kind))) in
            fields.into_iter().zip(files.iter().zip(KINDS))
        {
            save_grid(field, path)?;
            write_json(
                &sidecar_path(path),
                &Sidecar {
                    kind: kind.into(),
                    transition: key.clone(),
                    content_hash: hash.clone(),
                    iterations,
                    residual,
                    converged,
                    no_safe_switching: syn.refined.no_safe_switching,
                    nonnegative_nodes: field.count_nonnegative(),
                    nodes: field.grid().len(),
                    seconds,
                },
            )?;
        }
        if syn.refined.no_safe_switching {
            log::warn!("{key}: no safe switching state is reachable");
        }
        entries.push(RefineEntry {
            transition: key,
            cached: false,
            provided: false,
            converged: syn.back_unsafe.converged && syn.refined.converged,
            no_safe_switching: syn.refined.no_safe_switching,
        });
    }
    Ok(entries)
}

/// Refined CBFs for every transition: provided paths first, then `h_*.hcbf`
/// in the output directory, which must match the current configuration.
pub fn load_refined(run: &Run, sc: &Scenario) -> Result<BTreeMap<(usize, usize), GridFn>, CliError> {
    let hash = run.cfg.content_hash();
    let hint = format!("run `hcbf refine --config {}` first", run.label);
    let mut out = BTreeMap::new();
    for (pair, key) in transition_names(sc) {
        let grid = if let Some(path) = run.cfg.grids.get(&key) {
            load_grid(path)?
        } else {
            let path = run.out.join(format!("h_{}.hcbf", stem(&key)));
            if !path.is_file() {
                return Err(CliError::config(format!("missing {} for {key}; {hint}", path.display())));
            }
            match read_sidecar(&path) {
                Some(s) if s.content_hash == hash => {}
                _ => {
                    return Err(CliError::config(format!(
                        "{} was computed for a different configuration; {hint}",
                        path.display()
                    )))
                }
            }
            load_grid(&path)?
        };
        if grid.grid().ndim() != sc.automaton.state_dim() {
            return Err(CliError::config(format!(
                "grid for {key} has {} axes, the state has {}",
                grid.grid().ndim(),
                sc.automaton.state_dim()
            )));
        }
        out.insert(pair, grid);
    }
    Ok(out)
}

pub fn check(run: &Run) -> Result<PreconditionReport, CliError> {
    let sc = run.scenario()?;
    let refined = load_refined(run, &sc)?;
    let report = sc.check_preconditions(&refined)?;
    run.ensure_out()?;
    write_json(
        &run.out.join("preconditions.json"),
        &json!({
            "all_passed": report.all_passed(),
            "class_k_coefficient": sc.certify_gamma,
            "assumptions": report.assumptions,
        }),
    )?;
    Ok(report)
}

/// Simulates `policies` (the configured ones when `None`) and the unfiltered
/// nominal controller; writes `traj_<policy>.csv` and `verdict_<policy>.json`.
pub fn simulate(run: &Run, policies: Option<&[Policy]>) -> Result<Vec<PolicyRun>, CliError> {
    let sc = run.scenario()?;
    let refined = load_refined(run, &sc)?;
    let policies = policies.map_or_else(|| run.cfg.policies(), <[Policy]>::to_vec);
    let sim = run.cfg.sim();
    run.ensure_out()?;

    let nominal = sc.nominal.clone();
    let reference = run_hybrid(&sc.automaton, &OpenLoop(move |q, t, x: &[f64]| nominal(q, t, x)), &sc.x0, sc.q0, &sim)?;
    fs::write(run.out.join("traj_nominal.csv"), reference.to_csv_string())?;

    let runs = run_comparison(&sc, &refined, &policies, &sim)?;
    for r in &runs {
        let verdict = match &r.outcome {
            PolicyOutcome::NotApplicable(reason) => json!({
                "policy": r.policy,
                "applicable": false,
                "reason": reason,
            }),
            PolicyOutcome::Ran {
                trajectory,
                verdict,
                metrics,
            } => {
                fs::write(run.out.join(format!("traj_{}.csv", r.policy)), trajectory.to_csv_string())?;
                json!({
                    "policy": r.policy,
                    "applicable": true,
                    "safe": verdict.safe,
                    "first_violation": verdict.first_violation,
                    "switch_states": verdict.switch_states,
                    "segments": verdict.segments,
                    "terminal": trajectory.terminal,
                    "infeasible_samples": trajectory.infeasible_samples,
                    "metrics": metrics,
                    "seed": run.seed,
                })
            }
        };
        write_json(&run.out.join(format!("verdict_{}.json", r.policy)), &verdict)?;
    }
    Ok(runs)
}

/// True when some run stopped early on a fault.
pub fn any_fault(runs: &[PolicyRun]) -> bool {
    runs.iter().any(|r| r.ran().is_some_and(|(t, _, _)| t.terminal.is_fault()))
}

pub fn plot(run: &Run) -> Result<Vec<PathBuf>, CliError> {
    plot::render(&run.cfg.study, &run.out)
}

/// The metric reported as progress in the summary table.
pub fn progress_metric(spec: &ScenarioSpec) -> &'static str {
    match spec {
        ScenarioSpec::Acc(_) => "position_at_horizon",
        ScenarioSpec::Dubins(_) => "path_length",
    }
}

pub fn summary_table(spec: &ScenarioSpec, runs: &[PolicyRun]) -> String {
    let progress = progress_metric(spec);
    let mut out = format!("{:<22}{:<7}{:>24}{:>14}\n", "policy", "safe", progress, "min h");
    let mut notes = Vec::new();
    for r in runs {
        match r.ran() {
            Some((_, verdict, metrics)) => {
                let get = |k: &str| metrics.get(k).copied().unwrap_or(f64::NAN);
                out += &format!(
                    "{:<22}{:<7}{:>24.4}{:>14.4e}\n",
                    r.policy.name(),
                    if verdict.safe { "yes" } else { "no" },
                    get(progress),
                    get("min_h")
                );
            }
            None => notes.push(format!("{}: not applicable", r.policy)),
        }
    }
    for n in notes {
        out += &n;
        out.push('\n');
    }
    out
}

/// refine → check → simulate → plot. Refinement failures abort; the
/// precondition report is printed either way.
pub fn pipeline(run: &Run) -> Result<String, CliError> {
    let entries = refine(run)?;
    if let Some(e) = entries.iter().find(|e| !e.converged) {
        return Err(CliError::Failed(anyhow!("refinement of {} did not converge", e.transition)));
    }
    let report = check(run)?;
    let runs = simulate(run, None)?;
    if any_fault(&runs) {
        let bad: Vec<String> = runs
            .iter()
            .filter_map(|r| r.ran().filter(|(t, _, _)| t.terminal.is_fault()).map(|(t, _, _)| format!("{}: {:?}", r.policy, t.terminal)))
            .collect();
        return Err(CliError::Failed(anyhow!("simulation fault: {}", bad.join("; "))));
    }
    let plots = plot(run)?;
    let mut text = String::new();
    text += &format!("global-safety preconditions:\n{report}\n");
    text += &summary_table(&run.cfg.study, &runs);
    text += &format!("plots: {}\n", plots.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    Ok(text)
}
