use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("zero-norm embedding (collapsed representation)")]
    ZeroNorm,
    #[error("collapsed embedding: similarity matrix contains NaN")]
    CollapsedEmbedding,
    #[error("wrong input size: expected {expected}x{expected}, got {got_h}x{got_w}")]
    WrongInputSize {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("degenerate probability map: pixel {index} has all-zero probabilities")]
    DegenerateProbabilities { index: usize },
    #[error("non-finite loss at epoch {epoch} (last good epoch: {last_good:?})")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Option<usize>,
    },
    #[error("not enough data: {0}")]
    NotEnoughData(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
