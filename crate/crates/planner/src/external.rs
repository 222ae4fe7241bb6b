//! Adapter for an external MILP solver reached through an LP file.
//!
//! The bundled script drives HiGHS via its Python bindings. The interpreter
//! is `python3` unless `SNAREMAP_PYTHON` names another.

use std::collections::HashMap;
use std::process::Command;

use crate::error::{PlanError, Result};
use crate::milp::MilpModel;

const SCRIPT: &str = include_str!("../../../tools/highs_lp.py");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSolver {
    pub python: String,
}

impl Default for ExternalSolver {
    fn default() -> Self {
        Self { python: std::env::var("SNAREMAP_PYTHON").unwrap_or_else(|_| "python3".into()) }
    }
}

impl ExternalSolver {
    /// True when the interpreter starts and can import the bindings.
    pub fn available(&self) -> bool {
        Command::new(&self.python)
            .args(["-c", "import highspy"])
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    /// Solves the model; returns every variable's value in model order.
    pub fn solve(&self, model: &MilpModel) -> Result<Vec<f64>> {
        let dir = tempfile::tempdir()?;
        let script = dir.path().join("highs_lp.py");
        let lp = dir.path().join("model.lp");
        let sol = dir.path().join("model.sol");
        std::fs::write(&script, SCRIPT)?;
        std::fs::write(&lp, model.to_lp_string())?;
        let out = Command::new(&self.python)
            .arg(&script)
            .arg(&lp)
            .arg(&sol)
            .output()
            .map_err(|e| PlanError::AdapterUnavailable(format!("cannot run {}: {e}", self.python)))?;
        match out.status.code() {
            Some(0) => {}
            Some(3) => return Err(PlanError::AdapterUnavailable("highspy is not installed".into())),
            _ => {
                return Err(PlanError::Adapter(String::from_utf8_lossy(&out.stderr).trim().to_string()));
            }
        }
        let text = std::fs::read_to_string(&sol)?;
        let mut lines = text.lines();
        let status = lines.next().and_then(|l| l.strip_prefix("status ")).unwrap_or("unknown");
        match status {
            "Optimal" => {}
            "Infeasible" => return Err(PlanError::Infeasible("external solver proved infeasibility".into())),
            other => return Err(PlanError::Adapter(format!("solver status {other}"))),
        }
        let mut values = HashMap::new();
        for l in lines {
            let (name, v) = l
                .split_once(' ')
                .ok_or_else(|| PlanError::Adapter(format!("malformed solution line {l:?}")))?;
            let v: f64 = v.parse().map_err(|_| PlanError::Adapter(format!("bad value in {l:?}")))?;
            values.insert(name.to_string(), v);
        }
        // Variables absent from the file never appeared in a term; they are zero.
        Ok(model.names.iter().map(|n| values.get(n).copied().unwrap_or(0.0)).collect())
    }
}
