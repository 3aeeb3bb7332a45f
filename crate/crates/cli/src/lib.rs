//! Experiment harness: config files, single runs, sweeps, the sequential
//! τ → α → β selection, pruning, evaluation and run comparison.

use std::fmt;

pub mod commands;
pub mod config;
pub mod setup;

pub use config::ExperimentConfig;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<blockdistill::Error> for CliError {
    fn from(e: blockdistill::Error) -> Self {
        use blockdistill::Error as E;
        match e {
            E::Config(_) | E::Pairing { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
