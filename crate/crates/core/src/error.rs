use thiserror::Error;

use crate::attack::Norm;

/// Errors raised by the numeric kernel and the algorithms built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{segment}`: expected {expected}, got {actual}")]
    DimensionMismatch {
        segment: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{op} does not support the l_{norm} budget")]
    UnsupportedNorm { op: &'static str, norm: Norm },

    #[error("{op} requires {expected}")]
    UnsupportedArch {
        op: &'static str,
        expected: &'static str,
    },

    #[error("vertex enumeration refused: input dimension {dim} exceeds the bound {bound}")]
    EnumerationBound { dim: usize, bound: usize },

    #[error("non-finite gradient at batch {batch}")]
    NonFiniteGradient { batch: usize },

    #[error("margin certificate violated at index {index}: margin {margin} < required {required}")]
    CertificateViolated {
        index: usize,
        margin: f64,
        required: f64,
    },

    #[error("degenerate weights: {0}")]
    Degenerate(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
