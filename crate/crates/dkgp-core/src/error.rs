//! Crate-wide error type.

/// Everything that can go wrong across the numeric and I/O layers.
///
/// One flat enum instead of per-module error types: failures routinely cross
/// module boundaries (a Cholesky breakdown inside the training loop, a ragged
/// CSV inside the benchmark harness), and callers match on variants rather
/// than on wrapper layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {asym:e}")]
    NonSymmetric { row: usize, col: usize, asym: f64 },

    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{method} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{op} requires a nonzero vector")]
    ZeroVector { op: &'static str },

    #[error("backward requires a scalar output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("grid needs at least 4 nodes per dimension, got {m}")]
    GridTooSmall { m: usize },

    #[error("product grids support at most 4 dimensions, got {dims}")]
    TooManyDims { dims: usize },

    #[error("cannot build a grid from an empty point set")]
    EmptyGrid,

    #[error("rank {rank} exceeds operator dimension {n}")]
    RankTooLarge { rank: usize, n: usize },

    #[error("row {row}, column {col}: {value:?} is not a finite number")]
    Parse { row: usize, col: usize, value: String },

    #[error("row {row} has {got} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        got: usize,
        expected: usize,
    },

    #[error("no usable data: need a header, at least one data row, and at least two columns")]
    EmptyFile,

    #[error("split leaves too few rows: {side} set would have {count}")]
    TooFewRows { side: &'static str, count: usize },

    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),

    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("unknown model {name:?} (expected gp, dkl-mlp, dkl-kan1, or dkl-kan2)")]
    UnknownModel { name: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
