use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can surface. The variants double as the error
/// categories exposed through the C ABI, so keep them coarse.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("embedding set has no labels")]
    MissingLabels,

    #[error("empty input: {0}")]
    EmptySet(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::Dimension { expected, got }
    }

    /// True for errors caused by bad user input rather than a failure while
    /// running; the CLI maps these to exit status 1.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFinite(_))
    }
}
