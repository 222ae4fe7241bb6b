//! Synthetic parks with a known attack/detection process.
//!
//! A cell is attacked with a probability that is logistic in a random linear
//! function of its (standardised) features, and an attack is detected with
//! probability `1 - exp(-λ·effort)`. Observed labels therefore carry
//! one-sided noise: positives are always real, negatives are unreliable when
//! effort is low.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::griddata::{
    assemble_dataset, build_labels, consecutive_windows, reconstruct_effort, Observation,
    ObservationCategory, ObservationLog, ParkGrid, PatrolDataset, TimeCellMatrix, TimeWindow,
    Waypoint, WaypointTrack,
};

const DAY_SECS: f64 = 86_400.0;

/// Smooth random features, all cells inside the park, `num_posts` distinct posts.
pub fn generate_park(
    width: usize,
    height: usize,
    k: usize,
    num_posts: usize,
    seed: u64,
) -> Result<ParkGrid> {
    if k == 0 {
        return Err(Error::InvalidInput("synthetic parks need at least one feature".into()));
    }
    let n = width * height;
    if n == 0 {
        return Err(Error::InvalidGrid("grid must have at least one cell".into()));
    }
    if num_posts == 0 {
        return Err(Error::InvalidInput("at least one patrol post is required".into()));
    }
    if num_posts > n {
        return Err(Error::InvalidInput(format!(
            "{num_posts} patrol posts requested for {n} cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w_km, h_km) = (width as f64, height as f64);
    let span = w_km.max(h_km);
    let mut features = vec![vec![0.0; k]; n];
    for j in 0..k {
        let bumps = rng.gen_range(2..=5);
        for _ in 0..bumps {
            let cx = rng.gen_range(0.0..w_km);
            let cy = rng.gen_range(0.0..h_km);
            let r = rng.gen_range(0.15..0.5) * span;
            let amp = rng.gen_range(-1.0..1.0);
            for (cell, f) in features.iter_mut().enumerate() {
                let x = (cell % width) as f64 + 0.5;
                let y = (cell / width) as f64 + 0.5;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                f[j] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    let mut posts = sample_indices(&mut rng, n, num_posts).into_vec();
    posts.sort_unstable();
    let names = (1..=k).map(|j| format!("f_{j}")).collect();
    ParkGrid::new(width, height, 1.0, features, names, posts, vec![true; n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `Pr[attack]` per grid cell.
    pub attack_prob: Vec<f64>,
    /// Detection rate `λ` per grid cell, per km of effort.
    pub detection_rate: Vec<f64>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn new(attack_prob: Vec<f64>, detection_rate: Vec<f64>, seed: u64) -> Result<Self> {
        if attack_prob.len() != detection_rate.len() {
            return Err(Error::Shape("attack and detection vectors differ in length".into()));
        }
        if attack_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("attack probabilities must lie in [0,1]".into()));
        }
        if detection_rate.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidInput("detection rates must be finite and nonnegative".into()));
        }
        Ok(Self {
            attack_prob,
            detection_rate,
            seed,
        })
    }

    pub fn detection_prob(&self, cell: usize, effort: f64) -> f64 {
        1.0 - (-self.detection_rate[cell] * effort.max(0.0)).exp()
    }

    /// `Pr[attacked and detected]` at a given effort.
    pub fn label_prob(&self, cell: usize, effort: f64) -> f64 {
        self.attack_prob[cell] * self.detection_prob(cell, effort)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    /// Half-width of the uniform distribution of feature weights.
    pub weight_scale: f64,
    pub intercept: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            weight_scale: 1.5,
            intercept: -1.0,
            lambda_min: 0.2,
            lambda_max: 0.8,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_truth(grid: &ParkGrid, cfg: &TruthConfig, seed: u64) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7275_7468);
    let k = grid.num_features();
    let weights: Vec<f64> = (0..k)
        .map(|_| rng.gen_range(-1.0..=1.0) * cfg.weight_scale)
        .collect();
    let lambdas: Vec<f64> = (0..grid.num_cells())
        .map(|_| {
            if cfg.lambda_max > cfg.lambda_min {
                rng.gen_range(cfg.lambda_min..cfg.lambda_max)
            } else {
                cfg.lambda_min
            }
        })
        .collect();
    let cells = grid.masked_cells();
    let mut mean = vec![0.0; k];
    let mut sd = vec![0.0; k];
    for &c in &cells {
        for (j, v) in grid.features(c).iter().enumerate() {
            mean[j] += v / cells.len() as f64;
        }
    }
    for &c in &cells {
        for (j, v) in grid.features(c).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2) / cells.len() as f64;
        }
    }
    let attack = (0..grid.num_cells())
        .map(|c| {
            let z: f64 = grid
                .features(c)
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let s = sd[j].sqrt();
                    weights[j] * if s > 0.0 { (v - mean[j]) / s } else { 0.0 }
                })
                .sum();
            sigmoid(z + cfg.intercept)
        })
        .collect();
    GroundTruth {
        attack_prob: attack,
        detection_rate: lambdas,
        seed,
    }
}

/// Uniform draws for one cell across `num_timesteps` windows. The stream
/// depends only on `(seed, cell)`, so datasets sampled under different effort
/// policies share their randomness.
fn label_uniforms(seed: u64, cell: usize, num_timesteps: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64);
    (0..num_timesteps).map(|_| rng.gen::<f64>()).collect()
}

fn sample_labels(
    grid: &ParkGrid,
    truth: &GroundTruth,
    effort: &TimeCellMatrix<f64>,
    seed: u64,
) -> TimeCellMatrix<u8> {
    let t_max = effort.num_timesteps();
    let mut labels = TimeCellMatrix::zeros(t_max, grid.num_cells());
    for cell in grid.masked_cells() {
        let u = label_uniforms(seed, cell, t_max);
        for (t, ut) in u.into_iter().enumerate() {
            if ut < truth.label_prob(cell, effort.get(t, cell)) {
                labels.set(t, cell, 1);
            }
        }
    }
    labels
}

/// Samples labels `Bernoulli(attack · detection(effort))` under an effort
/// policy `(t, cell) -> km`.
pub fn sample_dataset(
    grid: Arc<ParkGrid>,
    truth: &GroundTruth,
    num_timesteps: usize,
    effort_policy: impl Fn(usize, usize) -> f64,
    seed: u64,
) -> Result<PatrolDataset> {
    if truth.attack_prob.len() != grid.num_cells() {
        return Err(Error::Shape("ground truth does not match the grid".into()));
    }
    let mut effort = TimeCellMatrix::zeros(num_timesteps, grid.num_cells());
    for t in 0..num_timesteps {
        for cell in grid.masked_cells() {
            let e = effort_policy(t, cell);
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "effort policy returned {e} at ({t}, {cell})"
                )));
            }
            effort.set(t, cell, e);
        }
    }
    let labels = sample_labels(&grid, truth, &effort, seed);
    assemble_dataset(grid, effort, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatrolSimConfig {
    pub patrols_per_window: usize,
    pub steps_per_patrol: usize,
    pub waypoint_interval_secs: f64,
    /// Concentration of each post's preferred heading; 0 is an unbiased walk.
    pub heading_bias: f64,
    pub stay_prob: f64,
}

impl Default for PatrolSimConfig {
    fn default() -> Self {
        Self {
            patrols_per_window: 20,
            steps_per_patrol: 16,
            waypoint_interval_secs: 1800.0,
            heading_bias: 1.0,
            stay_prob: 0.15,
        }
    }
}

/// Random-walk patrols from the posts, one waypoint per step at a random
/// point inside the current cell. Walks drift along a per-post heading and
/// turn back towards the post for the second half.
pub fn simulate_patrols(
    grid: &ParkGrid,
    windows: &[TimeWindow],
    cfg: &PatrolSimConfig,
    seed: u64,
) -> Result<Vec<WaypointTrack>> {
    let posts = grid.patrol_posts();
    if posts.is_empty() {
        return Err(Error::InvalidInput("patrol simulation needs a patrol post".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_7472);
    let headings: Vec<f64> = posts
        .iter()
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let size = grid.cell_size_km();
    let mut tracks = Vec::new();
    for (w, win) in windows.iter().enumerate() {
        let duration = cfg.steps_per_patrol as f64 * cfg.waypoint_interval_secs;
        let slack = (win.end - win.start - duration - cfg.waypoint_interval_secs).max(0.0);
        for p in 0..cfg.patrols_per_window {
            let post_idx = rng.gen_range(0..posts.len());
            let post = posts[post_idx];
            let heading = headings[post_idx] + rng.gen_range(-0.6..0.6);
            let t0 = win.start + rng.gen_range(0.0..=slack);
            let mut cell = post;
            let mut points = Vec::with_capacity(cfg.steps_per_patrol + 1);
            let mut push = |cell: usize, step: usize, rng: &mut ChaCha8Rng| {
                let (x, y) = grid.cell_xy(cell);
                points.push(Waypoint {
                    x_km: (x as f64 + rng.gen_range(0.1..0.9)) * size,
                    y_km: (y as f64 + rng.gen_range(0.1..0.9)) * size,
                    timestamp: t0 + step as f64 * cfg.waypoint_interval_secs,
                });
            };
            push(cell, 0, &mut rng);
            for step in 1..=cfg.steps_per_patrol {
                let returning = step * 2 > cfg.steps_per_patrol;
                if rng.gen::<f64>() >= cfg.stay_prob {
                    let nbrs = grid.neighbors(cell);
                    if !nbrs.is_empty() {
                        let (cx, cy) = grid.cell_xy(cell);
                        let target = if returning {
                            let (px, py) = grid.cell_xy(post);
                            (py as f64 - cy as f64).atan2(px as f64 - cx as f64)
                        } else {
                            heading
                        };
                        let weights: Vec<f64> = nbrs
                            .iter()
                            .map(|&nb| {
                                let (nx, ny) = grid.cell_xy(nb);
                                let ang = (ny as f64 - cy as f64).atan2(nx as f64 - cx as f64);
                                (cfg.heading_bias * (ang - target).cos()).exp()
                            })
                            .collect();
                        let total: f64 = weights.iter().sum();
                        let mut u = rng.gen::<f64>() * total;
                        let mut pick = nbrs[nbrs.len() - 1];
                        for (nb, wgt) in nbrs.iter().zip(&weights) {
                            if u < *wgt {
                                pick = *nb;
                                break;
                            }
                            u -= wgt;
                        }
                        cell = pick;
                    }
                }
                push(cell, step, &mut rng);
            }
            tracks.push(WaypointTrack::new(format!("w{w}-p{p}"), points)?);
        }
    }
    Ok(tracks)
}

/// Intercept for which the expected positive rate among patrolled rows
/// equals `target`. Found by bisection; the rate is monotone in the intercept.
pub fn calibrate_intercept(
    grid: &ParkGrid,
    cfg: &TruthConfig,
    effort: &TimeCellMatrix<f64>,
    target: f64,
    seed: u64,
) -> Result<f64> {
    let patrolled: Vec<(usize, usize)> = (0..effort.num_timesteps())
        .flat_map(|t| grid.masked_cells().into_iter().map(move |c| (t, c)))
        .filter(|&(t, c)| effort.get(t, c) > 0.0)
        .collect();
    if patrolled.is_empty() {
        return Err(Error::NoPositiveEffort);
    }
    let rate = |b: f64| {
        let truth = generate_truth(grid, &TruthConfig { intercept: b, ..*cfg }, seed);
        patrolled
            .iter()
            .map(|&(t, c)| truth.label_prob(c, effort.get(t, c)))
            .sum::<f64>()
            / patrolled.len() as f64
    };
    let (mut lo, mut hi) = (-30.0, 30.0);
    if !(rate(lo) <= target && target <= rate(hi)) {
        return Err(Error::InvalidInput(format!(
            "target positive rate {target} is not reachable with this detection model"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Named generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub num_features: usize,
    pub num_posts: usize,
    pub num_windows: usize,
    pub window_days: f64,
    pub start: f64,
    pub patrol: PatrolSimConfig,
    pub truth: TruthConfig,
    /// Expected positive rate among patrolled rows; `None` keeps `truth.intercept`.
    pub target_positive_rate: Option<f64>,
}

pub const PRESET_NAMES: &[&str] = &["tiny", "mfnp-like", "sws-like", "oneside-noise", "imbalanced"];

/// 2015-01-01T00:00:00Z
const DEFAULT_START: f64 = 1_420_070_400.0;

impl SynthPreset {
    pub fn named(name: &str) -> Option<Self> {
        let base = SynthPreset {
            name: name.to_string(),
            width: 8,
            height: 8,
            num_features: 3,
            num_posts: 1,
            num_windows: 6,
            window_days: 90.0,
            start: DEFAULT_START,
            patrol: PatrolSimConfig {
                patrols_per_window: 6,
                steps_per_patrol: 10,
                ..PatrolSimConfig::default()
            },
            truth: TruthConfig::default(),
            target_positive_rate: Some(0.1),
        };
        let preset = match name {
            "tiny" => base,
            "mfnp-like" => SynthPreset {
                width: 40,
                height: 40,
                num_features: 8,
                num_posts: 6,
                num_windows: 12,
                patrol: PatrolSimConfig {
                    patrols_per_window: 60,
                    steps_per_patrol: 24,
                    ..PatrolSimConfig::default()
                },
                target_positive_rate: Some(0.143),
                ..base
            },
            "sws-like" => SynthPreset {
                width: 60,
                height: 60,
                num_features: 8,
                num_posts: 24,
                num_windows: 24,
                patrol: PatrolSimConfig {
                    patrols_per_window: 420,
                    steps_per_patrol: 40,
                    heading_bias: 1.5,
                    stay_prob: 0.05,
                    ..PatrolSimConfig::default()
                },
                truth: TruthConfig {
                    weight_scale: 2.0,
                    ..TruthConfig::default()
                },
                target_positive_rate: Some(0.0036),
                ..base
            },
            "oneside-noise" => SynthPreset {
                width: 24,
                height: 24,
                num_features: 4,
                num_posts: 4,
                num_windows: 8,
                patrol: PatrolSimConfig {
                    patrols_per_window: 40,
                    steps_per_patrol: 24,
                    ..PatrolSimConfig::default()
                },
                truth: TruthConfig {
                    weight_scale: 1.5,
                    intercept: 0.0,
                    lambda_min: 0.15,
                    lambda_max: 0.35,
                },
                target_positive_rate: Some(0.12),
                ..base
            },
            "imbalanced" => SynthPreset {
                width: 30,
                height: 30,
                num_features: 5,
                num_posts: 4,
                num_windows: 8,
                patrol: PatrolSimConfig {
                    patrols_per_window: 50,
                    steps_per_patrol: 24,
                    ..PatrolSimConfig::default()
                },
                truth: TruthConfig {
                    weight_scale: 2.0,
                    ..TruthConfig::default()
                },
                target_positive_rate: Some(0.03),
                ..base
            },
            _ => return None,
        };
        Some(preset)
    }

    pub fn windows(&self) -> Vec<TimeWindow> {
        consecutive_windows(self.start, self.window_days * DAY_SECS, self.num_windows)
    }
}

/// Everything the generator produces for one run.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub grid: Arc<ParkGrid>,
    pub truth: GroundTruth,
    pub windows: Vec<TimeWindow>,
    pub tracks: Vec<WaypointTrack>,
    pub observations: ObservationLog,
    pub dataset: PatrolDataset,
}

/// Full synthetic pipeline: park, patrol tracks, reconstructed effort,
/// calibrated ground truth, sampled observations, and the assembled dataset.
pub fn simulate(preset: &SynthPreset, seed: u64) -> Result<SynthOutput> {
    let grid = Arc::new(generate_park(
        preset.width,
        preset.height,
        preset.num_features,
        preset.num_posts,
        seed,
    )?);
    let windows = preset.windows();
    let tracks = simulate_patrols(&grid, &windows, &preset.patrol, seed)?;
    let effort = reconstruct_effort(&grid, &tracks, &windows)?.effort;
    let truth_cfg = match preset.target_positive_rate {
        Some(rate) => TruthConfig {
            intercept: calibrate_intercept(&grid, &preset.truth, &effort, rate, seed)?,
            ..preset.truth
        },
        None => preset.truth,
    };
    let truth = generate_truth(&grid, &truth_cfg, seed);
    let labels = sample_labels(&grid, &truth, &effort, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_7365);
    let mut records = Vec::new();
    for (t, win) in windows.iter().enumerate() {
        for cell in grid.masked_cells() {
            let e = effort.get(t, cell);
            let (x, y) = grid.cell_xy(cell);
            let record = |category, rng: &mut ChaCha8Rng| Observation {
                x_km: (x as f64 + rng.gen_range(0.05..0.95)) * grid.cell_size_km(),
                y_km: (y as f64 + rng.gen_range(0.05..0.95)) * grid.cell_size_km(),
                timestamp: win.start + rng.gen_range(0.05..0.95) * (win.end - win.start),
                category,
            };
            if labels.get(t, cell) == 1 {
                records.push(record(ObservationCategory::Poaching, &mut rng));
            }
            if e > 0.0 && rng.gen::<f64>() < 0.05 {
                records.push(record(ObservationCategory::NonPoaching, &mut rng));
            }
        }
    }
    let observations = ObservationLog { records };
    let rebuilt = build_labels(&grid, &observations, &windows)?.labels;
    debug_assert_eq!(rebuilt, labels);
    let dataset = assemble_dataset(Arc::clone(&grid), effort, rebuilt)?;
    Ok(SynthOutput {
        grid,
        truth,
        windows,
        tracks,
        observations,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_park() {
        assert_eq!(generate_park(6, 5, 3, 2, 11).unwrap(), generate_park(6, 5, 3, 2, 11).unwrap());
        assert_ne!(generate_park(6, 5, 3, 2, 11).unwrap(), generate_park(6, 5, 3, 2, 12).unwrap());
    }

    #[test]
    fn single_cell_park() {
        let g = generate_park(1, 1, 1, 1, 0).unwrap();
        assert_eq!(g.num_cells(), 1);
        assert_eq!(g.num_features(), 1);
    }

    #[test]
    fn park_preconditions() {
        assert!(generate_park(3, 3, 2, 0, 0).is_err());
        assert!(generate_park(2, 2, 2, 5, 0).is_err());
        assert!(generate_park(2, 2, 0, 1, 0).is_err());
    }

    #[test]
    fn zero_detection_means_no_labels() {
        let grid = Arc::new(generate_park(5, 5, 2, 1, 3).unwrap());
        let truth = GroundTruth::new(vec![0.9; 25], vec![0.0; 25], 3).unwrap();
        let ds = sample_dataset(grid, &truth, 4, |_, _| 5.0, 3).unwrap();
        assert_eq!(ds.positive_count(), 0);
    }

    #[test]
    fn saturating_effort_detects_almost_everything() {
        let grid = Arc::new(generate_park(20, 20, 2, 1, 4).unwrap());
        let lambda = 0.5;
        let truth = GroundTruth::new(vec![1.0; 400], vec![lambda; 400], 4).unwrap();
        let ds = sample_dataset(grid, &truth, 10, |_, _| 10.0 / lambda, 4).unwrap();
        let rate = ds.positive_count() as f64 / ds.num_rows() as f64;
        assert!(rate >= 0.99, "rate {rate}");
    }

    #[test]
    fn detection_curve_shape() {
        let truth = GroundTruth::new(vec![0.5], vec![0.3], 0).unwrap();
        assert_eq!(truth.detection_prob(0, 0.0), 0.0);
        let mut prev = 0.0;
        for i in 1..50 {
            let d = truth.detection_prob(0, i as f64 * 0.2);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn simulated_tracks_rebuild_matching_labels() {
        let preset = SynthPreset::named("tiny").unwrap();
        let out = simulate(&preset, 5).unwrap();
        assert_eq!(out.dataset.num_timesteps(), preset.num_windows);
        assert!(out.dataset.positive_count() > 0);
        assert_eq!(out.dataset.coerced_labels(), 0);
        let again = simulate(&preset, 5).unwrap();
        assert_eq!(again.dataset.labels(), out.dataset.labels());
        assert_eq!(again.dataset.effort(), out.dataset.effort());
    }

    #[test]
    fn every_preset_resolves() {
        for name in PRESET_NAMES {
            assert!(SynthPreset::named(name).is_some(), "{name}");
        }
        assert!(SynthPreset::named("nope").is_none());
    }
}
