use crossover_core::Error as CoreError;
use thiserror::Error;

/// Exit codes: 0 success, 1 other failures, 2 unreadable input, 3 not
/// identifiable, 4 ill-conditioned.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                CoreError::Parse(_) => 2,
                CoreError::NotIdentifiable { .. } => 3,
                CoreError::IllConditioned(_) => 4,
                _ => 1,
            },
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;
