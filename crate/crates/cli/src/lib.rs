//! Experiment runner behind the `hbridge` binary: TOML configs, seeded sweeps,
//! CSV reports, SVG plots and a hashed artifact manifest.

pub mod config;
pub mod manifest;
pub mod runner;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, bad arguments, unreadable input.
    #[error("{0}")]
    Validation(String),
    /// A run produced non-finite values or a check failed its tolerance.
    #[error("{0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl From<hbridge::Error> for CliError {
    fn from(e: hbridge::Error) -> Self {
        match e {
            hbridge::Error::NumericalBlowup { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e.to_string()))
    }
}
