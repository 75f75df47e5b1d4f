use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("keypoint ({x}, {y}) outside image of size {width}x{height}")]
    OutOfBounds { x: f64, y: f64, width: f64, height: f64 },

    #[error("no prompt for category `{0}` and no fallback prompt configured")]
    MissingCategory(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("ingestion failed for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: String },

    #[error("non-finite loss at step {step} on pair `{pair}`")]
    NonFiniteLoss { step: usize, pair: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
