//! Command-line pipeline: refine transitions, check the global-safety
//! preconditions, simulate policies and render plots.

pub mod commands;
pub mod config;
pub mod plot;

use std::fmt;

/// Failure classes with stable exit statuses.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing input: exit status 2.
    Config(anyhow::Error),
    /// The computation ran and failed: exit status 1.
    Failed(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        CliError::Config(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) | CliError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<hcbf::Error> for CliError {
    fn from(e: hcbf::Error) -> Self {
        use hcbf::Error::*;
        match e {
            Config(_) | Settings(_) | Format(_) | GridMismatch(_) | InvalidGrid(_) | InvalidAutomaton(_) => {
                CliError::Config(e.into())
            }
            _ => CliError::Failed(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.into())
    }
}
