//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask count exceeds element count: {masks} masks for {elements} elements")]
    MaskCountExceedsElements { masks: usize, elements: usize },

    #[error("length not divisible: sequence length {len} is not divisible by {divisor}")]
    LengthNotDivisible { len: usize, divisor: usize },

    #[error("model head mismatch: expected {expected}, found {found}")]
    HeadMismatch { expected: String, found: String },

    #[error("no context: masked segment covers the whole window")]
    NoContext,

    #[error("backward requires a scalar output slot, found shape {d}x{t}")]
    NotScalar { d: usize, t: usize },

    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("degenerate labels: need at least one positive and one negative")]
    DegenerateLabels,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing label column: {0}")]
    MissingLabelColumn(String),

    #[error("csv parse error at row {row}: {msg}")]
    CsvFormat { row: usize, msg: String },

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
