//! Pipeline front-end: `gen`, `train`, `attack`, `eval`, `sweep` and
//! `report` over one run directory.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.

use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{cmd_attack, cmd_eval, cmd_gen, cmd_report, cmd_sweep, cmd_train, RunPaths};
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] pialab_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use pialab_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(E::Io { .. } | E::Format { .. }) => 4,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Worker cap from `PIALAB_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("PIALAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "PIALAB_THREADS: expected a positive integer, got `{v}`"
            ))),
        },
    }
}
