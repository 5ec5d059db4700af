use hasel_ph::error::{ControlError, IdentError, SolverError};
use thiserror::Error;

/// Failure of a run, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("validity error: {0}")]
    Validity(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Validity(_) => 2,
            CliError::Solver(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Validity { .. } => CliError::Validity(e.to_string()),
            SolverError::Settings(_) => CliError::Config(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Unreachable { .. } | ControlError::Gains(_) => CliError::Config(e.to_string()),
            _ => CliError::Validity(e.to_string()),
        }
    }
}

impl From<IdentError> for CliError {
    fn from(e: IdentError) -> Self {
        match e {
            IdentError::Solver(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<hasel_ph::error::ModelError> for CliError {
    fn from(e: hasel_ph::error::ModelError) -> Self {
        CliError::Validity(e.to_string())
    }
}
