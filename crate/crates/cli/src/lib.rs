//! Command-line front end: graph analysis, training runs, verification
//! suites and truncation sweeps driven by a JSON configuration file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 assumption
//! violation, 3 verification failure.

pub mod analyze;
pub mod config;
pub mod output;
pub mod run;
pub mod sweep;
pub mod verify;

use std::path::PathBuf;

use netmarl_core::zoo::{Variant, ZooError};
use thiserror::Error;

pub use config::{Config, Instance, LoadedConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Assumption(_) => 2,
            _ => 1,
        }
    }
}

impl From<ZooError> for CliError {
    fn from(e: ZooError) -> Self {
        use netmarl_core::consensus::ConsensusError;
        match e {
            ZooError::Assumption(c @ ConsensusError::Disconnected { .. }) => CliError::Assumption(c.to_string()),
            ZooError::Assumption(c) => CliError::Config(c.to_string()),
            ZooError::Config(_) | ZooError::Radius(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Options {
    pub out: PathBuf,
    /// Overrides the configuration's master seed.
    pub seed: Option<u64>,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    /// Run variants whose advisory assumptions fail.
    pub force: bool,
    /// Restrict training to these variants.
    pub variants: Vec<Variant>,
    /// Overrides the configuration's truncation indices.
    pub kappa: Option<Vec<usize>>,
    /// Record wall-clock time per episode (makes traces non-reproducible).
    pub wallclock: bool,
    /// Include `(i, i)` in serialized learning edges.
    pub self_loops: bool,
}

impl Options {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            seed: None,
            jobs: None,
            force: false,
            variants: Vec::new(),
            kappa: None,
            wallclock: false,
            self_loops: false,
        }
    }

    pub fn master_seed(&self, cfg: &Config) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }

    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(CliError::Usage("--jobs must be at least 1".into()));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| CliError::Runtime(e.to_string()))
    }
}

/// Result of a subcommand that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub exit_code: u8,
    pub files: Vec<PathBuf>,
    pub message: String,
}
