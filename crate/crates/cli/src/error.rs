use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] gmt_core::Error),
    #[error("self-test failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage or configuration, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        use gmt_core::Error as E;
        match self {
            Self::Usage(_) | Self::Config { .. } => 1,
            Self::Parse { .. } | Self::Io { .. } | Self::Data(_) => 2,
            Self::Core(E::Config(_) | E::SingularTransform { .. }) => 1,
            Self::Core(E::Shape { .. } | E::OutOfBounds(_) | E::TimeRegression { .. } | E::EmptyData(_)) => 2,
            Self::Core(E::NonFinite { .. } | E::DanglingTrajectory(_) | E::EmptyHistory) => 3,
            Self::Selftest(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
