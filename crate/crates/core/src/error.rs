use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feature: {0}")]
    InvalidFeature(String),

    #[error("filter size overflows for d={d}, s={s}")]
    SizeOverflow { d: usize, s: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("mean-field state missing: {0}")]
    StateMissing(&'static str),

    #[error("forward cache missing; call forward before backward")]
    CacheMissing,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("segment {0} has no members")]
    EmptySegment(usize),

    #[error("feature recipe does not fit the image: {0}")]
    RecipeMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
