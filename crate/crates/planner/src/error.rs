use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Core(#[from] snaremap_core::Error),

    #[error("invalid planning input: {0}")]
    InvalidInput(String),

    #[error("planning problem is infeasible: {0}")]
    Infeasible(String),

    #[error("{count} feasible paths exceed the enumeration limit {limit}")]
    TooManyPaths { count: f64, limit: usize },

    #[error("external solver unavailable: {0}")]
    AdapterUnavailable(String),

    #[error("external solver failed: {0}")]
    Adapter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PlanError>;
