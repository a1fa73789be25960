//! Experiment driver for the `padis` command-line tool.
//!
//! Every verb reads an [`ExperimentConfig`](experiment::ExperimentConfig)
//! from a flat `key = value` file, derives all randomness from its seed and
//! writes plain files: PGM/PPM images, CSV tables, binary checkpoints and
//! sinogram files.

pub mod app;
pub mod config;
pub mod experiment;
pub mod synth;

use std::path::Path;

pub use app::{run, Cli, Command};
pub use experiment::ExperimentConfig;

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "PADIS_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<padis::Error> for CliError {
    fn from(e: padis::Error) -> Self {
        match e {
            padis::Error::Numerical(_) => CliError::Numerical(e.to_string()),
            padis::Error::Io(_) | padis::Error::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
