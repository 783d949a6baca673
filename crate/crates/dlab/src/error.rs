//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Config file parsing or validation failure.
    #[error("config: {0}")]
    Config(String),

    /// Array dimensions do not agree with the configuration or each other.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dataset construction or loading failure.
    #[error("dataset: {0}")]
    Data(String),

    /// Checkpoint container read/write failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A loss or parameter became non-finite during training.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
