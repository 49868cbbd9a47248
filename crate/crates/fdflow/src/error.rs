use thiserror::Error;

/// Errors produced by tensor ops, model assembly, training and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value detected at {stage}")]
    NonFinite { stage: String },

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("flo: bad magic {0:?}, expected \"PIEH\"")]
    FloBadMagic([u8; 4]),

    #[error("flo: unreasonable dimensions {width}x{height}")]
    FloBadDimensions { width: i32, height: i32 },

    #[error("flo: truncated payload, expected {expected} bytes, got {got}")]
    FloTruncated { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
