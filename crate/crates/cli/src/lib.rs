//! Config-driven runner behind the `l2kd` binary: single streams, all-order
//! permutations, and post-hoc analysis of a finished run directory.

mod analyze;
mod config;
mod permute;
mod run;

use std::path::PathBuf;

pub use analyze::{cmd_analyze, split_table_path, CURVES_DIR, SPLITS_DIR};
pub use config::{Prepared, RunConfig, RESOLVED_CONFIG};
pub use permute::{cmd_permute, PermuteOptions, MANIFEST, PERMUTATION_JSON};
pub use run::{checkpoint_path, cmd_run, execute_run, run_name, teacher_path, FAILURE_STATE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifacts:\n  {}", .0.join("\n  "))]
    Missing(Vec<String>),
    #[error("{message}{}", .dump.as_ref().map(|p| format!(" (state dumped to {})", p.display())).unwrap_or_default())]
    Runtime { message: String, dump: Option<PathBuf> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime { message: e.to_string(), dump: None }
    }

    /// 0 ok, 1 runtime failure, 2 bad config or missing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing(_) => 2,
            CliError::Runtime { .. } | CliError::Io { .. } => 1,
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
    }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
