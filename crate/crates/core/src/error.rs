use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported character {ch:?} in {text:?}")]
    UnsupportedCharacter { ch: char, text: String },

    #[error("pixel height {px} is below the minimum of {min} needed to separate stroke weights")]
    PixelHeightTooSmall { px: u32, min: u32 },

    #[error("empty text")]
    EmptyText,

    #[error("layout overflow: words need {required}px but only {available}px are available")]
    LayoutOverflow { required: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("mask validation failed: {0}")]
    Validation(String),

    #[error("missing mask file {}", .0.display())]
    MissingMask(PathBuf),

    #[error("mask {} is not binary: {nonbinary} pixels fall outside the binarization tolerance", path.display())]
    NonBinaryMask { path: PathBuf, nonbinary: usize },

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("integrity check failed for {}: {reason}", path.display())]
    Integrity { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (batch sample ids: {sample_ids:?})")]
    NonFiniteLoss {
        step: usize,
        sample_ids: Vec<String>,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
