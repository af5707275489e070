use std::io;

use thiserror::Error;

/// Errors produced by tensor algebra, decomposition, update and persistence.
#[derive(Debug, Error)]
pub enum HtError {
    #[error("mode {mode} out of range for a tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("extent mismatch: {left} vs {right}")]
    ExtentMismatch { left: usize, right: usize },

    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("invalid dimension tree: {0}")]
    InvalidTree(String),

    #[error("unknown node ({layer}, {position})")]
    UnknownNode { layer: usize, position: usize },

    #[error("rank mismatch: expected {expected:?}, got {actual:?}")]
    RankMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("new basis is not orthogonal to the existing one (overlap {0:.3e})")]
    NonOrthogonal(f64),

    #[error("core ({layer}, {position}) lost orthonormality (deviation {deviation:.3e})")]
    CoreNotOrthonormal {
        layer: usize,
        position: usize,
        deviation: f64,
    },

    #[error("error budget exhausted: achieved {achieved:.6e} exceeds {budget:.6e}")]
    BudgetExhausted { achieved: f64, budget: f64 },

    #[error("singular value decomposition did not converge")]
    SvdFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (supported up to {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = HtError> = std::result::Result<T, E>;
