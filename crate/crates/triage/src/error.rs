use std::path::PathBuf;

use mcunet_core::Error as CoreError;

/// Everything that can go wrong outside the numeric core. The CLI maps the
/// variants onto exit codes and the service onto HTTP statuses.
#[derive(Debug, thiserror::Error)]
pub enum TriageError {
    #[error("config: {key}: {detail}")]
    Config { key: String, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = TriageError> = std::result::Result<T, E>;

/// Exit-code classes of a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Numeric,
    Other,
}

impl FailureKind {
    pub fn exit_code(self) -> u8 {
        match self {
            FailureKind::Other => 1,
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Numeric => 4,
        }
    }
}

impl TriageError {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        TriageError::Config { key: key.into(), detail: detail.into() }
    }

    pub fn data(detail: impl Into<String>) -> Self {
        TriageError::Data(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TriageError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> FailureKind {
        match self {
            TriageError::Config { .. } => FailureKind::Config,
            TriageError::Data(_) | TriageError::Io { .. } | TriageError::NotFound(_) => FailureKind::Data,
            TriageError::Conflict(_) => FailureKind::Other,
            TriageError::Core(e) => match e {
                CoreError::NonFinite { .. }
                | CoreError::Divergence { .. }
                | CoreError::NegativeMutualInformation { .. } => FailureKind::Numeric,
                CoreError::InvalidArgument { .. } => FailureKind::Config,
                _ => FailureKind::Data,
            },
        }
    }
}
