//! Pipeline configuration: a TOML file merged over built-in defaults, then
//! `--section.key=value` overrides merged over that.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snaremap_core::iware::{IWareConfig, WeightConfig};
use snaremap_core::learners::bagging::BaggingConfig;
use snaremap_core::learners::gp::GpConfig;
use snaremap_core::learners::LearnerKind;
use snaremap_core::riskmap::{BlockConfig, DEFAULT_SEGMENTS};
use snaremap_planner::{SolverChoice, Tolerances};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Directory every artifact is written to; it must already exist.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub ensemble: EnsembleConfig,
    pub riskmap: RiskmapConfig,
    pub planner: PlannerConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            ensemble: EnsembleConfig::default(),
            riskmap: RiskmapConfig::default(),
            planner: PlannerConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Input locations. Unset paths default to the standard file name inside
/// `out_dir`, which is where `simulate` and `ingest` write them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub preset: String,
    pub cell_size_km: f64,
    pub cells: Option<PathBuf>,
    pub waypoints: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub windows: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            cell_size_km: 1.0,
            cells: None,
            waypoints: None,
            observations: None,
            windows: None,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerChoice {
    BaggedTrees,
    Gp,
    BaggedGp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub num_thresholds: usize,
    pub learner: LearnerChoice,
    pub folds: usize,
    /// Trailing windows held out of training and scored.
    pub holdout: usize,
    pub gp_bags: usize,
    pub gp_balanced: bool,
    pub trees: BaggingConfig,
    pub gp: GpConfig,
    pub weights: WeightConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let base = IWareConfig::default();
        Self {
            num_thresholds: base.num_thresholds,
            learner: LearnerChoice::BaggedTrees,
            folds: base.folds,
            holdout: 1,
            gp_bags: 10,
            gp_balanced: true,
            trees: BaggingConfig::default(),
            gp: GpConfig::default(),
            weights: base.weights,
        }
    }
}

impl EnsembleConfig {
    pub fn iware(&self) -> IWareConfig {
        let learner = match self.learner {
            LearnerChoice::BaggedTrees => LearnerKind::BaggedTrees(self.trees),
            LearnerChoice::Gp => LearnerKind::Gp(self.gp),
            LearnerChoice::BaggedGp => LearnerKind::BaggedGp {
                num_bags: self.gp_bags,
                balanced: self.gp_balanced,
                gp: self.gp,
            },
        };
        IWareConfig {
            num_thresholds: self.num_thresholds,
            learner,
            folds: self.folds,
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskmapConfig {
    /// PWL segments; the risk map is evaluated at the `segments + 1` breakpoints.
    pub segments: usize,
    /// Largest effort level in km; unset means twice the 95th percentile of
    /// observed per-window cell effort.
    pub c_max: Option<f64>,
    pub blocks: BlockConfig,
}

impl Default for RiskmapConfig {
    fn default() -> Self {
        Self { segments: DEFAULT_SEGMENTS, c_max: None, blocks: BlockConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Patrol post cell id; unset picks the park's first post.
    pub post: Option<usize>,
    pub horizon: usize,
    pub k: usize,
    pub beta: f64,
    /// Robustness weights used by `plan --beta-sweep`.
    pub betas: Vec<f64>,
    pub solver: SolverChoice,
    /// Absolute optimality gap for branch-and-bound.
    pub mip_gap: f64,
    pub node_limit: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            post: None,
            horizon: 6,
            k: 2,
            beta: 0.0,
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            solver: SolverChoice::Auto,
            mip_gap: Tolerances::default().mip_gap,
            node_limit: Tolerances::default().node_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub threshold: f64,
    /// Windows scored by `evaluate`; unset means the held-out windows.
    pub windows: Option<Vec<usize>>,
    pub fieldtest: Option<PathBuf>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { threshold: 0.5, windows: None, fieldtest: None }
    }
}

impl PipelineConfig {
    /// Defaults, then the file (if any), then overrides, in that order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut merged = Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            merged = text
                .parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        for (key, raw) in overrides {
            set_path(&mut merged, key, parse_value(raw))?;
        }
        let mut full = Value::try_from(Self::default()).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut full, Value::Table(merged.clone()));
        let cfg: Self = full.try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        let known = Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(unknown) = first_unknown(&Value::Table(merged), &known, "") {
            return Err(CliError::Config(format!("unknown configuration key {unknown:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.data.cell_size_km.is_finite() && self.data.cell_size_km > 0.0) {
            return bad(format!("data.cell_size_km must be positive, got {}", self.data.cell_size_km));
        }
        if self.ensemble.num_thresholds == 0 {
            return bad("ensemble.num_thresholds must be at least 1".into());
        }
        if self.ensemble.holdout == 0 {
            return bad("ensemble.holdout must be at least 1".into());
        }
        if self.riskmap.segments == 0 {
            return bad("riskmap.segments must be at least 1".into());
        }
        if let Some(c) = self.riskmap.c_max {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("riskmap.c_max must be positive, got {c}"));
            }
        }
        if self.planner.horizon == 0 || self.planner.k == 0 {
            return bad("planner.horizon and planner.k must be at least 1".into());
        }
        for &b in std::iter::once(&self.planner.beta).chain(&self.planner.betas) {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("beta {b} outside [0, 1]"));
            }
        }
        if !(self.planner.mip_gap.is_finite() && self.planner.mip_gap >= 0.0) {
            return bad(format!("planner.mip_gap must be nonnegative, got {}", self.planner.mip_gap));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return bad(format!("metrics.threshold {} outside [0, 1]", self.metrics.threshold));
        }
        Ok(())
    }

    /// An explicitly configured path, else `out_dir/name`.
    pub fn path_or(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// A TOML literal if it parses as one, else the raw text as a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        let entry = cur.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {s:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Deep merge; tables merge key by key, anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// First key path present in `given` but absent from the parsed config.
fn first_unknown(given: &Value, known: &Value, prefix: &str) -> Option<String> {
    let (Value::Table(g), Value::Table(k)) = (given, known) else { return None };
    for (key, v) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => return Some(path),
            Some(kv) => {
                if let Some(p) = first_unknown(v, kv, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn defaults_load_without_a_file() {
        assert_eq!(PipelineConfig::load(None, &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = PipelineConfig::load(
            None,
            &[
                ov("planner.k", "3"),
                ov("planner.solver", "bnb"),
                ov("ensemble.trees.num_trees", "7"),
                ov("ensemble.trees.tree.max_depth", "4"),
                ov("data.preset", "mfnp-like"),
                ov("riskmap.c_max", "12.5"),
                ov("seed", "9"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.planner.k, 3);
        assert_eq!(cfg.planner.solver, SolverChoice::Bnb);
        assert_eq!(cfg.ensemble.trees.num_trees, 7);
        assert_eq!(cfg.ensemble.trees.tree.max_depth, 4);
        assert_eq!(cfg.ensemble.trees.balanced, BaggingConfig::default().balanced);
        assert_eq!(cfg.data.preset, "mfnp-like");
        assert_eq!(cfg.riskmap.c_max, Some(12.5));
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 4\n[planner]\nhorizon = 5\nbeta = 0.5\n").unwrap();
        let cfg = PipelineConfig::load(Some(&p), &[ov("planner.beta", "1.0")]).unwrap();
        assert_eq!((cfg.seed, cfg.planner.horizon, cfg.planner.beta), (4, 5, 1.0));
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        for o in [ov("planner.kk", "1"), ov("planner.k", "\"x\""), ov("planner.beta", "2"), ov("nope.x", "1")] {
            let e = PipelineConfig::load(None, &[o.clone()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{o:?}: {e}");
        }
        let missing = PipelineConfig::load(Some(Path::new("/nonexistent/c.toml")), &[]).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }
}
