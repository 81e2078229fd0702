//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation; names both shapes.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-tensor dimension problem (bad axis, non-divisible extents...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation produced a NaN or infinity from finite inputs.
    #[error("{op}: non-finite value produced (overflow or invalid operation)")]
    NonFinite { op: &'static str },

    /// Zero-norm or otherwise degenerate numeric input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Index out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An API contract was violated (non-scalar backward root, missing
    /// gradient, wrong list length...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or insufficient data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed persisted file; carries the 1-based failing line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Artifacts from mismatched provenance (e.g. wrong backbone).
    #[error("provenance error: {0}")]
    Provenance(String),

    /// Degenerate statistics (zero variance, too few points).
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Bad command-line usage; maps to exit code 2.
    #[error("usage error: {0}")]
    Usage(String),

    /// A training run diverged.
    #[error("run error: {0}")]
    Run(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
