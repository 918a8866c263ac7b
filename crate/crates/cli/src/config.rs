//! Pipeline configuration: a built-in study with its parameters plus optional
//! overrides for synthesis, simulation and policy selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hcbf::filter::Policy;
use hcbf::reach::ReachSettings;
use hcbf::scenarios::{Scenario, ScenarioSpec};
use hcbf::sim::SimSettings;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Study key (`"scenario": "acc" | "dubins"`) and its parameters.
    pub study: ScenarioSpec,
    /// Refinement settings; the study's defaults when absent.
    #[serde(default)]
    pub reach: Option<ReachSettings>,
    #[serde(default)]
    pub sim: Option<SimSettings>,
    /// Policies to simulate; refined, switch-unaware and global-cbf when absent.
    #[serde(default)]
    pub policies: Option<Vec<Policy>>,
    /// Precomputed refined CBFs keyed `"from->to"`, used instead of refining
    /// that transition. Relative paths resolve against the config file.
    #[serde(default)]
    pub grids: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

pub const DEFAULT_POLICIES: [Policy; 3] = [Policy::Refined, Policy::SwitchUnaware, Policy::GlobalCbf];

impl ScenarioConfig {
    pub fn for_key(key: &str) -> Option<Self> {
        Some(Self {
            study: ScenarioSpec::from_key(key)?,
            reach: None,
            sim: None,
            policies: None,
            grids: BTreeMap::new(),
            out_dir: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .context("config does not match the schema")
            .map_err(CliError::Config)
    }

    /// Reads and validates a config file; grid paths come back absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(CliError::Config)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.grids.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(CliError::Config)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let scenario = self.study.build()?;
        self.reach().validate()?;
        let sim = self.sim();
        if !(sim.dt > 0.0 && sim.horizon > 0.0) {
            bail!("sim.dt and sim.horizon must be positive");
        }
        let names = transition_names(&scenario);
        for (key, path) in &self.grids {
            if !names.iter().any(|(_, k)| k == key) {
                bail!("grids: {key:?} is not a transition; expected one of {:?}", names.iter().map(|n| &n.1).collect::<Vec<_>>());
            }
            if !path.is_file() {
                bail!("grids: {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn reach(&self) -> ReachSettings {
        self.reach.clone().unwrap_or_else(|| self.study.default_reach())
    }

    pub fn sim(&self) -> SimSettings {
        self.sim.clone().unwrap_or_else(|| self.study.default_sim())
    }

    pub fn policies(&self) -> Vec<Policy> {
        self.policies.clone().unwrap_or_else(|| DEFAULT_POLICIES.to_vec())
    }

    /// SHA-256 over everything refinement depends on: the study parameters,
    /// the refinement settings and the library version. Output paths,
    /// simulation settings and policies are left out.
    pub fn content_hash(&self) -> String {
        #[derive(Serialize)]
        struct Inputs<'a> {
            version: &'a str,
            study: &'a ScenarioSpec,
            reach: ReachSettings,
        }
        let bytes = serde_json::to_vec(&Inputs {
            version: env!("CARGO_PKG_VERSION"),
            study: &self.study,
            reach: self.reach(),
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// `((from, to), "from->to")` for every transition of the study.
pub fn transition_names(scenario: &Scenario) -> Vec<((usize, usize), String)> {
    let a = &scenario.automaton;
    a.transitions()
        .into_iter()
        .map(|(f, t)| ((f, t), format!("{}->{}", a.mode(f).name, a.mode(t).name)))
        .collect()
}
