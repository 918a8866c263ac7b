use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dynamics evaluation in mode {mode} produced a non-finite value at state {state:?}")]
    Dynamics { mode: String, state: Vec<f64> },

    #[error("non-finite sample {value} at grid node {node:?}")]
    NonFiniteSample { node: Vec<f64>, value: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid file format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid settings: {0}")]
    Settings(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite CBF gradient for {cbf} at state {state:?}")]
    Gradient { cbf: String, state: Vec<f64> },

    #[error("integration fault in mode {mode} at t = {t}: non-finite state")]
    Integration { mode: String, t: f64 },

    #[error("ambiguous successor from mode {mode}: guards to {candidates:?} all hold at {state:?}")]
    Determinism {
        mode: String,
        candidates: Vec<String>,
        state: Vec<f64>,
    },

    #[error("invalid automaton: {0}")]
    InvalidAutomaton(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
