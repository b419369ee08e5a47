use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the despeckling toolkit.
///
/// Numeric failures (`NonFinite`, `NanLoss`, `SqrtNegative`) are kept
/// distinct from data/configuration errors so callers can map them to
/// different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    #[error("invalid reduction axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("sqrt of negative input (min element {min})")]
    SqrtNegative { min: f64 },

    #[error("convolution output extent is not integral: (({input} + 2*{padding} - {kernel}) / {stride}) + 1")]
    NonIntegralOutput {
        input: usize,
        padding: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("backward requires a scalar loss, got {numel} elements")]
    BackwardNonScalar { numel: usize },

    #[error("backward called twice on the same recorded graph")]
    BackwardConsumed,

    #[error("backward called on a graph that is not recording")]
    BackwardWithoutRecording,

    #[error("variables belong to different graphs")]
    GraphMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape_mismatch(
        context: impl Into<String>,
        left: impl std::fmt::Display,
        right: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NanLoss { .. } | Error::SqrtNegative { .. }
        )
    }
}
