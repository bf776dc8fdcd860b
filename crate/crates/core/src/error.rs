use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: expected {expected}, received {received}")]
    Shape { expected: String, received: String },

    #[error("words not in the toy vocabulary: {}", .0.join(", "))]
    UnknownWords(Vec<String>),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer set mismatch: expected {expected:?}, found {found:?}")]
    LayerMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An inversion hit a non-finite loss or gradient. `partial` holds the
    /// trace so far and the last finite image as its final image.
    #[error("run aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        partial: Box<crate::engine::RunResult>,
    },

    #[error("missing {0}")]
    Missing(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("architecture hash mismatch: file has {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("statistics file: {0}")]
    StatsFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
