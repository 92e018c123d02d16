//! Command-line pipelines over the robust GNSS toolkit: scenario simulation,
//! positioning with any of the six methods, evaluation and diagnostics.

pub mod commands;
pub mod config;
pub mod formats;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Malformed or unreadable input, invalid configuration or unwritable output.
    #[error("{0}")]
    Input(String),
    /// Solver failure or divergence.
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn solver(msg: impl Into<String>) -> Self {
        CliError::Solver(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }
}
