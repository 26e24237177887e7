//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient requires a scalar loss, got {0} elements")]
    NotScalar(usize),
    #[error("leaf tensor is not on the tape reachable from the loss")]
    LeafNotOnTape,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("ill-posed least squares: {0}")]
    IllPosed(String),
    #[error("degenerate leverage: leave-one-out hat diagonal reached 1")]
    DegenerateLeverage,
    #[error("too few rows: need at least {need}, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("unknown activation tap '{0}'")]
    UnknownTap(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("loss scale underflowed below 1 (persistent overflow)")]
    LossScaleUnderflow,
    #[error("empty result: {0}")]
    Empty(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
