use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("dataset has no rows with positive patrol effort")]
    NoPositiveEffort,

    #[error("filtering at threshold {0} km left no training rows")]
    EmptyFilter(f64),

    #[error("balanced bagging needs at least one positive label")]
    NoPositives,

    #[error("cholesky factorisation failed even with jitter {0:e}")]
    Cholesky(f64),

    #[error("bad timestamp {0:?}")]
    Timestamp(String),

    #[error("unsupported model version {0}")]
    Version(u32),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
