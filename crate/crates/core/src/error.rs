use std::path::PathBuf;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingest error in {source_name} line {line}: {message}")]
    Ingest {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("frame plan for {video_id} references missing images at indices {missing:?}")]
    MissingFrames { video_id: String, missing: Vec<u64> },

    #[error("prompt budget violated: {estimate} tokens against a limit of {limit}")]
    BudgetViolation { estimate: u64, limit: u64 },

    #[error("manifest validation failed with {} violation(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),

    #[error("stage `{stage}` needs upstream artifact {missing}")]
    Dependency { stage: String, missing: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True when a remote model kept failing after all retries.
    pub fn is_backend_exhaustion(&self) -> bool {
        matches!(
            self,
            Error::Backend(BackendError::TransportExhausted { .. })
                | Error::Backend(BackendError::Remote { .. })
        )
    }
}
