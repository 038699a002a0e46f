use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("zero degree at row {0}; cannot normalize")]
    ZeroDegree(usize),

    #[error("missing supervision: {0}")]
    MissingLabel(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("prediction cache miss for video {video} frame {frame}")]
    CacheMiss { video: String, frame: usize },

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed record: {0}")]
    Record(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
