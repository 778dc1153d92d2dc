use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity appeared where the contract requires finite values.
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    /// Invalid argument outside of shape problems (negative threshold, zero stride, ...).
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// Malformed configuration file or key.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint bytes could not be decoded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Checkpoint disagrees with the requested model configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Problem file / dataset parse failure.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
