use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A run that finished but violated a numeric guarantee.
    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] gsvox::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for numeric failures, 2 for usage, input and I/O errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Core(e) if e.is_numeric() => 1,
            _ => 2,
        }
    }
}
