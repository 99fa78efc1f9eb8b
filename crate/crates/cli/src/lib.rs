//! Experiment driver: configuration, candidate persistence and the
//! build → certify → grid → validate pipeline behind the `kroa` binary.

pub mod app;
pub mod candidate_io;
pub mod config;
pub mod hexfloat;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    /// Missing, malformed or incompatible input files.
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(field: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("config field `{field}`: {msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            CliError::Config(_) | CliError::Input(_) | CliError::Io(_) => 2,
        }
    }
}
