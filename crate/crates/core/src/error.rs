//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation; the message names the op
    /// and the offending extents.
    #[error("shape error: {0}")]
    Shape(String),

    /// backward/input_gradient called on a non-scalar root node.
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    /// A second derivative was requested through an op whose backward pass is
    /// not itself differentiable.
    #[error("op '{0}' does not have a differentiable backward")]
    NonDifferentiableBackward(&'static str),

    /// Correlation of an (effectively) constant image is undefined.
    #[error("degenerate image: zero variance, correlation undefined")]
    DegenerateImage,

    /// A configuration value outside its documented domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training aborted because a loss left the finite range.
    #[error("non-finite loss at iteration {iteration} ({context})")]
    NonFiniteLoss { iteration: u64, context: String },

    /// Malformed or truncated on-disk artifact (volume file, checkpoint,
    /// manifest).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// A dataset record whose on-disk contents disagree with the manifest.
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },

    /// Metric undefined for the given masks.
    #[error("overlap metric undefined: both masks are empty")]
    EmptyMasks,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
