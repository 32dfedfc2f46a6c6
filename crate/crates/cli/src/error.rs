use cnslab_core::error::Error;
use std::path::Path;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{context}: {source}")]
    Numerics { context: String, source: Error },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn numerics(scenario: &str, source: Error) -> Self {
        CliError::Numerics { context: format!("scenario '{scenario}'"), source }
    }

    /// 0 success, 2 validation, 3 divergence, 4 degeneracy, 5 I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } => 5,
            CliError::Numerics { source, .. } => match source {
                Error::Argument(_) | Error::Data(_) | Error::Precondition(_) => 2,
                Error::Divergence(_) => 3,
                Error::Degeneracy(_) | Error::Resolution(_) => 4,
                Error::Numerical(_) => 1,
            },
        }
    }
}
