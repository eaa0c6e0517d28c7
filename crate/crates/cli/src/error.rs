use std::io;

use thiserror::Error;

/// Failures of a CLI command, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0} check(s) failed")]
    ChecksFailed(usize),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl From<nbm::Error> for CliError {
    fn from(e: nbm::Error) -> Self {
        match e {
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            nbm::Error::Io(e) => CliError::Io(e),
            nbm::Error::Config(m) => CliError::Config(m),
            other => CliError::Config(other.to_string()),
        }
    }
}
