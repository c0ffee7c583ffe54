use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid branch spec: {0}")]
    BranchSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask is not binary: {0}")]
    NonBinaryMask(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing ground truth for `{stem}` (expected {})", expected.display())]
    MissingGroundTruth { stem: String, expected: PathBuf },

    #[error("missing teacher depth for `{id}` (expected {})", expected.display())]
    MissingDepth { id: String, expected: PathBuf },

    #[error("unmatched stems: {}", .0.join(", "))]
    UnmatchedStems(Vec<String>),

    #[error("non-finite loss at iteration {iteration} (batch {batch_ids:?}): {breakdown}")]
    NonFiniteLoss {
        iteration: u64,
        batch_ids: Vec<String>,
        breakdown: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
