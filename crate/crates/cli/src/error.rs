use std::path::PathBuf;

use r2s_core::Error;

/// Failure of a command, carrying the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),

    /// Numeric failure after the diagnostic dump was written.
    #[error("{message} (diagnostics in {})", dump.display())]
    Numeric { message: String, dump: PathBuf },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric { .. } => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Image { .. } | Error::Integrity(_) => EXIT_IO,
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            },
        }
    }
}
