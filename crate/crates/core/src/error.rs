use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("insufficient correspondences: {found} usable pairs, need at least {required}")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("stage failed: {0}")]
    Stage(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}
