//! Library half of the `oct-track` binary: config parsing, the command
//! implementations, evaluation metrics and the SVG plotter. Kept as a lib so
//! integration tests can drive the exact code paths the binary uses.

pub mod config;
pub mod eval;
pub mod ops;
pub mod plot;

use thiserror::Error;

/// Command failures, split by exit code: configuration and input validation
/// problems exit with 2, everything that goes wrong at run time with 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub(crate) fn validation(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

pub(crate) fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}
