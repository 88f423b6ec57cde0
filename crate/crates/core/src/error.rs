use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FsrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FsrError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("masked cross-attention has no unmasked token to attend to")]
    NoAttendableToken,

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image encoding failed for {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl FsrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Dataset { .. } | Self::Checkpoint { .. } | Self::Json { .. }
        ) || matches!(self, Self::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
