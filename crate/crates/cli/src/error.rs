use std::path::Path;

use snaremap_core::Error as CoreError;
use snaremap_planner::PlanError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for configuration or input problems, 3 for infeasible plans, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Cholesky(_) => CliError::Failed(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Core(c) => c.into(),
            PlanError::Infeasible(_) => CliError::Infeasible(e.to_string()),
            PlanError::Adapter(_) | PlanError::Numerical(_) => CliError::Failed(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

/// Prefixes an error with the file it concerns, keeping its exit class.
pub fn at(path: &Path) -> impl Fn(CliError) -> CliError + '_ {
    move |e| {
        let p = path.display();
        match e {
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
            CliError::Input(m) => CliError::Input(format!("{p}: {m}")),
            CliError::Infeasible(m) => CliError::Infeasible(format!("{p}: {m}")),
            CliError::Failed(m) => CliError::Failed(format!("{p}: {m}")),
        }
    }
}
