use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sof_core::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for invalid input, 3 for I/O, 4 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        use sof_core::Error as E;
        match self {
            Self::Io { .. } | Self::Core(E::Io { .. }) => 3,
            Self::Core(E::NonFinite(_) | E::Numerical(_)) | Self::ChecksFailed { .. } => 4,
            _ => 2,
        }
    }
}
