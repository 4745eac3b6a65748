use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: input contains NaN")]
    NanInput { op: &'static str },
    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("optimizer: parameter `{0}` has no gradient buffer")]
    MissingGrad(String),
    #[error("{0}")]
    Format(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        loss: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("oracle failed in cycle {cycle}: {reason}")]
    Oracle { cycle: usize, reason: String },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
