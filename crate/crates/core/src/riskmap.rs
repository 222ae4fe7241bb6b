//! Effort sweeps of a trained ensemble, piecewise-linear risk models for the
//! planner, and field-test block selection.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::griddata::{ParkGrid, PatrolDataset};
use crate::iware::{combine_qualified, quantile_sorted, IWareEnsemble};

/// Design row used for forecasting the window after `ds`: static features
/// followed by the cell's effort in the last observed window.
pub fn forecast_row(ds: &PatrolDataset, cell: usize) -> Vec<f64> {
    let mut row = ds.grid().features(cell).to_vec();
    row.push(ds.effort().get(ds.num_timesteps() - 1, cell));
    row
}

/// `g_v(c)` and squashed `ν_v(c)` per cell and effort level. Cells outside
/// the park mask hold no values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMap {
    effort_levels: Vec<f64>,
    /// `cells[v]` is `None` for unmasked cells, else `(prob, var)` per level.
    cells: Vec<Option<Vec<(f64, f64)>>>,
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidInput("need at least one effort level".into()));
    }
    if levels.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidInput("effort levels must be finite and nonnegative".into()));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("effort levels must be strictly increasing".into()));
    }
    Ok(())
}

impl RiskMap {
    pub fn new(effort_levels: Vec<f64>, cells: Vec<Option<Vec<(f64, f64)>>>) -> Result<Self> {
        check_levels(&effort_levels)?;
        for v in cells.iter().flatten() {
            if v.len() != effort_levels.len() {
                return Err(Error::Shape("one (prob, var) pair per level expected".into()));
            }
            if v.iter().any(|&(p, u)| !(0.0..=1.0).contains(&p) || !(0.0..1.0).contains(&u)) {
                return Err(Error::InvalidInput("prob must lie in [0,1] and var in [0,1)".into()));
            }
        }
        Ok(Self { effort_levels, cells })
    }

    pub fn effort_levels(&self) -> &[f64] {
        &self.effort_levels
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn prob(&self, cell: usize, level: usize) -> Option<f64> {
        self.cells[cell].as_ref().map(|v| v[level].0)
    }

    pub fn var(&self, cell: usize, level: usize) -> Option<f64> {
        self.cells[cell].as_ref().map(|v| v[level].1)
    }

    /// Per-cell probabilities at one level.
    pub fn prob_layer(&self, level: usize) -> Vec<Option<f64>> {
        (0..self.cells.len()).map(|v| self.prob(v, level)).collect()
    }

    /// `cell_id,effort_level,prob,var`; unmasked cells have empty values.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cell_id", "effort_level", "prob", "var"])?;
        for (v, vals) in self.cells.iter().enumerate() {
            for (l, c) in self.effort_levels.iter().enumerate() {
                let (p, u) = match vals {
                    Some(x) => (x[l].0.to_string(), x[l].1.to_string()),
                    None => (String::new(), String::new()),
                };
                w.write_record([v.to_string(), c.to_string(), p, u])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the ensemble at every effort level for every masked cell, using
/// the cell's forecast row.
pub fn sweep_riskmap(ens: &IWareEnsemble, ds: &PatrolDataset, levels: &[f64]) -> Result<RiskMap> {
    check_levels(levels)?;
    if ens.num_features() != ds.design_width() {
        return Err(Error::Dimension {
            expected: ens.num_features(),
            got: ds.design_width(),
        });
    }
    let grid = ds.grid();
    let cells = (0..grid.num_cells())
        .into_par_iter()
        .map(|v| {
            if !grid.is_masked(v) {
                return Ok(None);
            }
            let preds = ens.member_predictions(&forecast_row(ds, v))?;
            Ok(Some(
                levels
                    .iter()
                    .map(|&c| {
                        let (g, raw) = combine_qualified(ens.thresholds(), ens.weights(), &preds, c);
                        (g, ens.squash(raw))
                    })
                    .collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    RiskMap::new(levels.to_vec(), cells)
}

/// Piecewise-linear `g_v` and `ν_v` on breakpoints shared by all cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlRiskModel {
    breakpoints: Vec<f64>,
    /// Per cell; `None` outside the park mask.
    g: Vec<Option<Vec<f64>>>,
    nu: Vec<Option<Vec<f64>>>,
}

impl PwlRiskModel {
    /// Breakpoints must start at 0 and increase strictly; every masked cell
    /// carries one value per breakpoint in `[0, 1]`.
    pub fn new(breakpoints: Vec<f64>, g: Vec<Option<Vec<f64>>>, nu: Vec<Option<Vec<f64>>>) -> Result<Self> {
        check_levels(&breakpoints)?;
        if breakpoints.len() < 2 || breakpoints[0] != 0.0 {
            return Err(Error::InvalidInput("breakpoints must start at 0 and span one segment".into()));
        }
        if g.len() != nu.len() {
            return Err(Error::Shape("g and nu cover different cell counts".into()));
        }
        for (a, b) in g.iter().zip(&nu) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) if a.len() == breakpoints.len() && b.len() == breakpoints.len() => {
                    if a.iter().chain(b).any(|x| !(0.0..=1.0).contains(x)) {
                        return Err(Error::InvalidInput("PWL values must lie in [0,1]".into()));
                    }
                }
                _ => return Err(Error::Shape("PWL values do not match breakpoints".into())),
            }
        }
        Ok(Self { breakpoints, g, nu })
    }

    /// Reads values off a sweep taken at uniform levels `0, h, …, m·h`.
    pub fn from_riskmap(rm: &RiskMap) -> Result<Self> {
        let g = rm.cells.iter().map(|c| c.as_ref().map(|v| v.iter().map(|x| x.0).collect())).collect();
        let nu = rm.cells.iter().map(|c| c.as_ref().map(|v| v.iter().map(|x| x.1).collect())).collect();
        Self::new(rm.effort_levels.clone(), g, nu)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn c_max(&self) -> f64 {
        *self.breakpoints.last().expect("at least two breakpoints")
    }

    pub fn num_cells(&self) -> usize {
        self.g.len()
    }

    pub fn has_cell(&self, cell: usize) -> bool {
        self.g[cell].is_some()
    }

    pub fn g_values(&self, cell: usize) -> Option<&[f64]> {
        self.g[cell].as_deref()
    }

    pub fn nu_values(&self, cell: usize) -> Option<&[f64]> {
        self.nu[cell].as_deref()
    }

    fn interpolate(&self, vals: &[f64], c: f64) -> f64 {
        let bp = &self.breakpoints;
        if c <= 0.0 {
            return vals[0];
        }
        if c >= self.c_max() {
            return vals[vals.len() - 1];
        }
        let k = bp.partition_point(|&b| b <= c) - 1;
        let t = (c - bp[k]) / (bp[k + 1] - bp[k]);
        vals[k] + t * (vals[k + 1] - vals[k])
    }

    pub fn eval_g(&self, cell: usize, c: f64) -> Option<f64> {
        self.g[cell].as_deref().map(|v| self.interpolate(v, c))
    }

    pub fn eval_nu(&self, cell: usize, c: f64) -> Option<f64> {
        self.nu[cell].as_deref().map(|v| self.interpolate(v, c))
    }

    /// Robust utility `U = g − β·g·ν` at each breakpoint. The product is
    /// formed before interpolation, so `U` is piecewise linear.
    pub fn utility_values(&self, cell: usize, beta: f64) -> Option<Vec<f64>> {
        let g = self.g[cell].as_deref()?;
        let nu = self.nu[cell].as_deref()?;
        Some(g.iter().zip(nu).map(|(&g, &n)| g - beta * g * n).collect())
    }

    pub fn eval_utility(&self, cell: usize, c: f64, beta: f64) -> Option<f64> {
        self.utility_values(cell, beta).map(|u| self.interpolate(&u, c))
    }
}

/// `m + 1` uniform breakpoints on `[0, c_max]`.
pub fn uniform_breakpoints(m: usize, c_max: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one PWL segment".into()));
    }
    if !(c_max.is_finite() && c_max > 0.0) {
        return Err(Error::InvalidInput("c_max must be positive".into()));
    }
    Ok((0..=m).map(|i| c_max * i as f64 / m as f64).collect())
}

pub const DEFAULT_SEGMENTS: usize = 25;

/// Twice the 95th percentile of positive per-window cell efforts; 1 km if
/// the dataset has no patrolled rows.
pub fn default_c_max(ds: &PatrolDataset) -> f64 {
    let mut e: Vec<f64> = ds.rows().map(|r| r.effort).filter(|&c| c > 0.0).collect();
    if e.is_empty() {
        return 1.0;
    }
    e.sort_by(f64::total_cmp);
    2.0 * quantile_sorted(&e, 0.95)
}

/// Median positive per-window cell effort; 1 km if there is none.
pub fn nominal_effort(ds: &PatrolDataset) -> f64 {
    let mut e: Vec<f64> = ds.rows().map(|r| r.effort).filter(|&c| c > 0.0).collect();
    if e.is_empty() {
        return 1.0;
    }
    e.sort_by(f64::total_cmp);
    quantile_sorted(&e, 0.5)
}

pub fn build_pwl(ens: &IWareEnsemble, ds: &PatrolDataset, m: usize, c_max: f64) -> Result<PwlRiskModel> {
    let rm = sweep_riskmap(ens, ds, &uniform_breakpoints(m, c_max)?)?;
    PwlRiskModel::from_riskmap(&rm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub block_size: usize,
    /// Risk-percentile bands `(lo, hi]`, in order high, medium, low.
    pub bands: [(f64, f64); 3],
    pub effort_cutoff_percentile: f64,
    pub per_band: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            block_size: 3,
            bands: [(80.0, 100.0), (40.0, 60.0), (0.0, 20.0)],
            effort_cutoff_percentile: 50.0,
            per_band: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Cell at the block's centre (lower-left of centre for even sizes).
    pub center: usize,
    /// Lower-left cell of the block.
    pub origin: usize,
    pub risk: f64,
    pub historical_effort: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSelection {
    pub block_size: usize,
    pub effort_cutoff: f64,
    pub high: Vec<Block>,
    pub medium: Vec<Block>,
    pub low: Vec<Block>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct BlockEntry {
    center: usize,
    risk: f64,
}

impl BlockSelection {
    pub fn bands(&self) -> [(&'static str, &[Block]); 3] {
        [("high", &self.high), ("medium", &self.medium), ("low", &self.low)]
    }

    /// `{"high": [{"center", "risk"}...], "medium": ..., "low": ...}`.
    pub fn to_json(&self) -> Result<String> {
        let mut map = serde_json::Map::new();
        for (name, blocks) in self.bands() {
            let entries: Vec<BlockEntry> = blocks.iter().map(|b| BlockEntry { center: b.center, risk: b.risk }).collect();
            map.insert(name.into(), serde_json::to_value(entries)?);
        }
        Ok(serde_json::to_string_pretty(&serde_json::Value::Object(map))?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// All fully-masked `b×b` blocks with their mean risk and summed historical
/// effort, in origin order.
pub fn convolve_blocks(grid: &ParkGrid, risk: &[Option<f64>], effort: &[f64], b: usize) -> Result<Vec<Block>> {
    let n = grid.num_cells();
    if risk.len() != n || effort.len() != n {
        return Err(Error::Shape("risk and effort need one value per cell".into()));
    }
    if b == 0 || b > grid.width() || b > grid.height() {
        return Err(Error::InvalidInput(format!("block size {b} does not fit the grid")));
    }
    let mut out = Vec::new();
    for y in 0..=grid.height() - b {
        for x in 0..=grid.width() - b {
            let members: Vec<usize> = (0..b)
                .flat_map(|dy| (0..b).map(move |dx| (x + dx, y + dy)))
                .map(|(cx, cy)| grid.cell_id(cx, cy))
                .collect();
            let vals: Option<Vec<f64>> = members.iter().map(|&v| risk[v]).collect();
            let Some(vals) = vals else { continue };
            out.push(Block {
                center: grid.cell_id(x + (b - 1) / 2, y + (b - 1) / 2),
                origin: grid.cell_id(x, y),
                risk: vals.iter().sum::<f64>() / vals.len() as f64,
                historical_effort: members.iter().map(|&v| effort[v]).sum(),
            });
        }
    }
    Ok(out)
}

/// Convolves risk into blocks, drops blocks above the effort cutoff, ranks
/// the rest by risk (ties by origin) and fills each percentile band with its
/// highest-risk blocks.
pub fn select_field_test_blocks(
    grid: &ParkGrid,
    risk: &[Option<f64>],
    historical_effort: &[f64],
    cfg: &BlockConfig,
) -> Result<BlockSelection> {
    for &(lo, hi) in &cfg.bands {
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidInput(format!("bad percentile band ({lo}, {hi}]")));
        }
    }
    let mut sorted_bands = cfg.bands;
    sorted_bands.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted_bands.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::InvalidInput("percentile bands overlap".into()));
    }
    let blocks = convolve_blocks(grid, risk, historical_effort, cfg.block_size)?;
    let mut efforts: Vec<f64> = blocks.iter().map(|b| b.historical_effort).collect();
    efforts.sort_by(f64::total_cmp);
    let cutoff = if efforts.is_empty() {
        0.0
    } else {
        quantile_sorted(&efforts, cfg.effort_cutoff_percentile / 100.0)
    };
    let mut kept: Vec<Block> = blocks.into_iter().filter(|b| b.historical_effort <= cutoff).collect();
    kept.sort_by(|a, b| a.risk.total_cmp(&b.risk).then(a.origin.cmp(&b.origin)));
    let n = kept.len();
    let mut warnings = Vec::new();
    let mut picks: Vec<Vec<Block>> = Vec::new();
    for (name, &(lo, hi)) in ["high", "medium", "low"].iter().zip(&cfg.bands) {
        // Rank r (1-based, ascending) sits at percentile 100·r/n.
        let mut band: Vec<Block> = kept
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let pct = 100.0 * (i + 1) as f64 / n as f64;
                pct > lo && pct <= hi
            })
            .map(|(_, b)| b.clone())
            .collect();
        band.sort_by(|a, b| b.risk.total_cmp(&a.risk).then(a.origin.cmp(&b.origin)));
        if band.len() < cfg.per_band {
            let msg = format!("{name} band has {} blocks, {} requested", band.len(), cfg.per_band);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        band.truncate(cfg.per_band);
        picks.push(band);
    }
    let low = picks.pop().unwrap_or_default();
    let medium = picks.pop().unwrap_or_default();
    let high = picks.pop().unwrap_or_default();
    Ok(BlockSelection {
        block_size: cfg.block_size,
        effort_cutoff: cutoff,
        high,
        medium,
        low,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::griddata::tests::open_grid;

    fn pwl(vals: Vec<f64>, c_max: f64) -> PwlRiskModel {
        let m = vals.len() - 1;
        let nu = vec![0.0; vals.len()];
        PwlRiskModel::new(uniform_breakpoints(m, c_max).unwrap(), vec![Some(vals), None], vec![Some(nu), None]).unwrap()
    }

    #[test]
    fn interpolation_midpoint_and_clamp() {
        let p = pwl(vec![0.2, 0.4, 0.5], 2.0);
        assert!((p.eval_g(0, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(p.eval_g(0, 1.0), Some(0.4));
        assert_eq!(p.eval_g(0, 2.0), Some(0.5));
        assert_eq!(p.eval_g(0, 9.0), Some(0.5));
        assert_eq!(p.eval_g(1, 1.0), None);
    }

    #[test]
    fn breakpoints_are_uniform() {
        let b = uniform_breakpoints(4, 2.0).unwrap();
        assert_eq!(b, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(uniform_breakpoints(0, 1.0).is_err());
        assert!(uniform_breakpoints(3, 0.0).is_err());
    }

    #[test]
    fn pwl_rejects_out_of_range() {
        let bp = uniform_breakpoints(1, 1.0).unwrap();
        assert!(PwlRiskModel::new(bp.clone(), vec![Some(vec![0.0, 1.5])], vec![Some(vec![0.0, 0.0])]).is_err());
        assert!(PwlRiskModel::new(bp, vec![Some(vec![0.0])], vec![Some(vec![0.0])]).is_err());
    }

    #[test]
    fn uniform_risk_convolves_to_itself() {
        let g = open_grid(5, 4, 1);
        let risk = vec![Some(0.7); 20];
        let blocks = convolve_blocks(&g, &risk, &[0.0; 20], 3).unwrap();
        assert_eq!(blocks.len(), 3 * 2);
        assert!(blocks.iter().all(|b| (b.risk - 0.7).abs() < 1e-15));
        assert_eq!(blocks[0].center, g.cell_id(1, 1));
    }

    #[test]
    fn hundred_blocks_fall_into_expected_bands() {
        // 1×1 blocks on a 10×10 grid: risks 1..100, no effort.
        let g = open_grid(10, 10, 1);
        let risk: Vec<Option<f64>> = (0..100).map(|i| Some((i + 1) as f64)).collect();
        let cfg = BlockConfig {
            block_size: 1,
            per_band: 100,
            ..BlockConfig::default()
        };
        let sel = select_field_test_blocks(&g, &risk, &[0.0; 100], &cfg).unwrap();
        let mut high: Vec<f64> = sel.high.iter().map(|b| b.risk).collect();
        high.sort_by(f64::total_cmp);
        assert_eq!(high, (81..=100).map(f64::from).collect::<Vec<_>>());
        let mut low: Vec<f64> = sel.low.iter().map(|b| b.risk).collect();
        low.sort_by(f64::total_cmp);
        assert_eq!(low, (1..=20).map(f64::from).collect::<Vec<_>>());
        assert_eq!(sel.medium.len(), 20);
        assert_eq!(sel.medium[0].risk, 60.0);
    }

    #[test]
    fn high_effort_blocks_are_excluded() {
        let g = open_grid(6, 6, 1);
        let risk: Vec<Option<f64>> = (0..36).map(|i| Some(i as f64 / 36.0)).collect();
        let mut effort = vec![0.0; 36];
        let hot = g.cell_id(5, 5);
        effort[hot] = 100.0;
        // The top-right corner also holds the highest risk.
        let sel = select_field_test_blocks(&g, &risk, &effort, &BlockConfig::default()).unwrap();
        for (_, blocks) in sel.bands() {
            for b in blocks {
                assert!(b.historical_effort <= sel.effort_cutoff);
                assert_ne!(b.origin, g.cell_id(3, 3));
            }
        }
    }

    #[test]
    fn short_bands_warn() {
        let g = open_grid(3, 3, 1);
        let risk = vec![Some(0.5); 9];
        let sel = select_field_test_blocks(&g, &risk, &[0.0; 9], &BlockConfig::default()).unwrap();
        assert_eq!(sel.high.len(), 1);
        assert!(sel.medium.is_empty() && sel.low.is_empty());
        assert_eq!(sel.warnings.len(), 3);
    }

    #[test]
    fn blocks_json_has_three_bands() {
        let g = open_grid(4, 4, 1);
        let risk: Vec<Option<f64>> = (0..16).map(|i| Some(i as f64 / 16.0)).collect();
        let sel = select_field_test_blocks(&g, &risk, &[0.0; 16], &BlockConfig { block_size: 1, ..BlockConfig::default() }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&sel.to_json().unwrap()).unwrap();
        for k in ["high", "medium", "low"] {
            assert!(v[k].is_array());
        }
        assert_eq!(v["high"][0]["center"], 15);
    }
}
