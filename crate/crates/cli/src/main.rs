use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcbf::filter::Policy;
use hcbf_cli::commands::{self, Run};
use hcbf_cli::config::ScenarioConfig;
use hcbf_cli::CliError;

#[derive(Parser)]
#[command(name = "hcbf", version, about = "Refine, check and simulate switching CBF controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute switching sets, backward sets and refined CBFs.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Recompute even when cached artifacts match.
        #[arg(long)]
        force: bool,
    },
    /// Simulate policies with the refined CBFs from a previous refine.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Policy to run; repeat for several. Defaults to the config's list.
        #[arg(long)]
        policy: Vec<Policy>,
        /// Recorded in the verdict files; the simulation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the global-safety preconditions on the refined kernels.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Draw SVG figures from the simulated trajectories.
    Plot {
        #[command(flatten)]
        common: Common,
    },
    /// refine, check, simulate and plot in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    config: Option<PathBuf>,
    /// Built-in study with default settings: acc or dubins.
    #[arg(long)]
    scenario: Option<String>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run(&self) -> Result<Run, CliError> {
        let (cfg, label) = match (&self.config, &self.scenario) {
            (Some(path), _) => (ScenarioConfig::load(path)?, path.display().to_string()),
            (None, Some(key)) => {
                let cfg = ScenarioConfig::for_key(key)
                    .ok_or_else(|| CliError::config(format!("unknown scenario {key:?}; expected acc or dubins")))?;
                (cfg, format!("<file> (or --scenario {key})"))
            }
            (None, None) => return Err(CliError::config("either --config or --scenario is required")),
        };
        Ok(Run::new(cfg, label, self.out.clone()))
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("HCBF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("HCBF_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(e.into()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Refine { common, force } => {
            let mut run = common.run()?;
            run.force = force;
            let entries = commands::refine(&run)?;
            let mut failed = Vec::new();
            for e in &entries {
                let state = if e.provided {
                    "provided"
                } else if e.cached {
                    "cached"
                } else {
                    "refined"
                };
                println!(
                    "{}: {state}, converged {}{}",
                    e.transition,
                    e.converged,
                    if e.no_safe_switching { ", no safe switching" } else { "" }
                );
                if !e.converged {
                    failed.push(e.transition.clone());
                }
            }
            println!("artifacts in {}", run.out.display());
            if !failed.is_empty() {
                return Err(CliError::Failed(anyhow::anyhow!("did not converge: {}", failed.join(", "))));
            }
        }
        Command::Simulate { common, policy, seed } => {
            let mut run = common.run()?;
            run.seed = seed;
            let policies = (!policy.is_empty()).then_some(policy);
            let runs = commands::simulate(&run, policies.as_deref())?;
            print!("{}", commands::summary_table(&run.cfg.study, &runs));
            if commands::any_fault(&runs) {
                return Err(CliError::Failed(anyhow::anyhow!("a simulation stopped on a fault")));
            }
        }
        Command::Check { common } => {
            let run = common.run()?;
            let report = commands::check(&run)?;
            print!("{report}");
            if !report.all_passed() {
                return Err(CliError::Failed(anyhow::anyhow!("preconditions do not hold")));
            }
        }
        Command::Plot { common } => {
            let run = common.run()?;
            for p in commands::plot(&run)? {
                println!("{}", p.display());
            }
        }
        Command::Pipeline { common, force, seed } => {
            let mut run = common.run()?;
            run.force = force;
            run.seed = seed;
            print!("{}", commands::pipeline(&run)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
