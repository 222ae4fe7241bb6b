//! Effort-threshold ensemble.
//!
//! Learner `i` is trained after discarding negatives recorded with effort
//! `<= θ_i`; positives are always kept. At prediction time only learners with
//! `θ_i <= c` are qualified, and their globally optimised weights are
//! renormalised over that set.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::griddata::PatrolDataset;
use crate::learners::{Learner, LearnerKind, Prediction, TrainMatrix};

pub const MODEL_VERSION: u32 = 1;

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the log loss.
pub const CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    thresholds: Vec<f64>,
}

impl ThresholdSet {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.first() != Some(&0.0) {
            return Err(Error::InvalidInput("the first threshold must be 0".into()));
        }
        if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("thresholds must be finite and nondecreasing".into()));
        }
        Ok(Self { thresholds })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Number of learners qualified at effort `c`: `|{i : θ_i <= c}|`.
    pub fn qualified(&self, c: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= c).max(1)
    }
}

/// Linear-interpolation quantile of sorted data at `q ∈ [0,1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `θ_1 = 0`, `θ_i` = quantile `(i-1)/I` of the positive efforts. Repeated
/// values are collapsed.
pub fn select_thresholds(ds: &PatrolDataset, num: usize) -> Result<ThresholdSet> {
    let efforts: Vec<f64> = ds.rows().map(|r| r.effort).filter(|&e| e > 0.0).collect();
    thresholds_from_efforts(&efforts, num)
}

pub fn thresholds_from_efforts(efforts: &[f64], num: usize) -> Result<ThresholdSet> {
    if num == 0 {
        return Err(Error::InvalidInput("at least one threshold is required".into()));
    }
    let mut sorted: Vec<f64> = efforts.iter().copied().filter(|&e| e > 0.0).collect();
    if sorted.is_empty() {
        return Err(Error::NoPositiveEffort);
    }
    sorted.sort_by(f64::total_cmp);
    let mut out = vec![0.0];
    for i in 2..=num {
        let q = quantile_sorted(&sorted, (i - 1) as f64 / num as f64);
        if q > *out.last().unwrap() {
            out.push(q);
        }
    }
    if out.len() < num {
        warn!("collapsed {} duplicate effort thresholds; using {}", num - out.len(), out.len());
    }
    ThresholdSet::new(out)
}

/// Row indices (in `ds.rows()` order) kept at threshold `θ`.
pub fn filter_indices(ds: &PatrolDataset, theta: f64) -> Vec<usize> {
    ds.rows()
        .enumerate()
        .filter(|(_, r)| r.label || r.effort > theta)
        .map(|(i, _)| i)
        .collect()
}

/// Keeps positives and the negatives recorded with effort above `θ`.
pub fn filter_dataset(ds: &PatrolDataset, theta: f64) -> Result<TrainMatrix> {
    if !(theta >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold {theta} must be nonnegative")));
    }
    let rows: Vec<_> = ds.rows().collect();
    let keep = filter_indices(ds, theta);
    if keep.is_empty() {
        return Err(Error::EmptyFilter(theta));
    }
    TrainMatrix::with_ids(
        keep.iter().map(|&i| ds.design_row(rows[i].t, rows[i].cell)).collect(),
        keep.iter().map(|&i| rows[i].label).collect(),
        keep,
    )
}

/// Design rows, labels and efforts of the patrolled rows (effort > 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRows {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub efforts: Vec<f64>,
    pub cells: Vec<usize>,
    pub timesteps: Vec<usize>,
}

pub fn patrolled_rows(ds: &PatrolDataset) -> EvalRows {
    let mut out = EvalRows {
        features: Vec::new(),
        labels: Vec::new(),
        efforts: Vec::new(),
        cells: Vec::new(),
        timesteps: Vec::new(),
    };
    for r in ds.rows().filter(|r| r.effort > 0.0) {
        out.features.push(ds.design_row(r.t, r.cell));
        out.labels.push(r.label);
        out.efforts.push(r.effort);
        out.cells.push(r.cell);
        out.timesteps.push(r.t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_iters: 500,
            tol: 1e-8,
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    if p.is_finite() {
        p.clamp(CLAMP, 1.0 - CLAMP)
    } else {
        0.5
    }
}

/// Row `r` mixes learners `0..qualified[r]` with renormalised weights.
fn row_mixture(w: &[f64], preds: &[Vec<f64>], q: usize, r: usize) -> (f64, f64) {
    let total: f64 = w[..q].iter().sum();
    if total <= 0.0 {
        let p = (0..q).map(|i| clamp_prob(preds[i][r])).sum::<f64>() / q as f64;
        return (p, 0.0);
    }
    let p = (0..q).map(|i| w[i] * clamp_prob(preds[i][r])).sum::<f64>() / total;
    (p, total)
}

fn check_shapes(preds: &[Vec<f64>], labels: &[bool], qualified: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no learners to weight".into()));
    }
    if labels.is_empty() || preds.iter().any(|p| p.len() != labels.len()) {
        return Err(Error::Shape("prediction rows do not match labels".into()));
    }
    if qualified.len() != labels.len() || qualified.iter().any(|&q| q == 0 || q > preds.len()) {
        return Err(Error::Shape("qualified counts must lie in 1..=learners per row".into()));
    }
    Ok(())
}

/// Mean log loss of `Σ_i w_i p_i` over the rows (every learner qualified).
pub fn mixture_log_loss(weights: &[f64], preds: &[Vec<f64>], labels: &[bool]) -> f64 {
    let all = vec![preds.len(); labels.len()];
    qualified_log_loss(weights, preds, labels, &all)
}

/// Mean log loss when row `r` uses only learners `0..qualified[r]`, with
/// weights renormalised over them, exactly as at prediction time.
pub fn qualified_log_loss(weights: &[f64], preds: &[Vec<f64>], labels: &[bool], qualified: &[usize]) -> f64 {
    let n = labels.len();
    (0..n)
        .map(|r| {
            let p = clamp_prob(row_mixture(weights, preds, qualified[r], r).0);
            if labels[r] {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n as f64
}

/// Exponentiated-gradient minimisation of the mixture log loss over the
/// simplex, starting from uniform weights. `preds[i][r]` is learner `i` on row `r`.
pub fn optimize_weights(preds: &[Vec<f64>], labels: &[bool], cfg: &WeightConfig) -> Result<Vec<f64>> {
    let all = vec![preds.len(); labels.len()];
    optimize_weights_qualified(preds, labels, &all, cfg)
}

/// As [`optimize_weights`], but row `r` only mixes learners `0..qualified[r]`.
pub fn optimize_weights_qualified(
    preds: &[Vec<f64>],
    labels: &[bool],
    qualified: &[usize],
    cfg: &WeightConfig,
) -> Result<Vec<f64>> {
    check_shapes(preds, labels, qualified)?;
    let m = preds.len();
    let mut w = vec![1.0 / m as f64; m];
    if m == 1 {
        return Ok(w);
    }
    let clamped: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| p.iter().map(|&v| clamp_prob(v)).collect())
        .collect();
    exponentiated_gradient(&mut w, &clamped, labels, qualified, cfg);
    // EG only approaches faces of the simplex slowly: drop any weight whose
    // removal lowers the loss, then re-polish on the smaller support.
    for _ in 0..m {
        let mut loss = qualified_log_loss(&w, &clamped, labels, qualified);
        let mut order: Vec<usize> = (0..m).filter(|&i| w[i] > 0.0).collect();
        order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
        let mut pruned = false;
        for i in order {
            let rest = 1.0 - w[i];
            if rest <= 0.0 {
                continue;
            }
            let mut cand: Vec<f64> = w.iter().map(|&v| v / rest).collect();
            cand[i] = 0.0;
            let l = qualified_log_loss(&cand, &clamped, labels, qualified);
            if l < loss {
                w = cand;
                loss = l;
                pruned = true;
            }
        }
        if !pruned {
            break;
        }
        exponentiated_gradient(&mut w, &clamped, labels, qualified, cfg);
    }
    Ok(w)
}

/// Multiplicative-weights descent with a backtracking step; zero weights stay zero.
fn exponentiated_gradient(w: &mut Vec<f64>, clamped: &[Vec<f64>], labels: &[bool], qualified: &[usize], cfg: &WeightConfig) {
    let m = w.len();
    let n = labels.len() as f64;
    let mut step = cfg.step;
    let mut loss = qualified_log_loss(w, clamped, labels, qualified);
    for _ in 0..cfg.max_iters {
        let mut grad = vec![0.0; m];
        for (r, &y) in labels.iter().enumerate() {
            let q = qualified[r];
            let (raw, total) = row_mixture(w, clamped, q, r);
            if q == 1 || total <= 0.0 {
                continue;
            }
            let p = raw.clamp(CLAMP, 1.0 - CLAMP);
            let dl = if y { -1.0 / p } else { 1.0 / (1.0 - p) };
            // d p / d w_i = (p_i - p) / Σ_{j<q} w_j for qualified i.
            for i in 0..q {
                grad[i] += dl * (clamped[i][r] - raw) / total / n;
            }
        }
        let gmin = (0..m).filter(|&i| w[i] > 0.0).map(|i| grad[i]).fold(f64::INFINITY, f64::min);
        let mut accepted = None;
        while step > 1e-12 {
            let mut next: Vec<f64> = w
                .iter()
                .zip(&grad)
                .map(|(&wi, g)| if wi > 0.0 { (wi * (-step * (g - gmin)).exp()).max(f64::MIN_POSITIVE) } else { 0.0 })
                .collect();
            let z: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= z);
            let l = qualified_log_loss(&next, clamped, labels, qualified);
            if l <= loss {
                accepted = Some((next, l));
                break;
            }
            step *= 0.5;
        }
        let Some((next, l)) = accepted else { break };
        let delta = next.iter().zip(w.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        *w = next;
        loss = l;
        step *= 2.0;
        if delta < cfg.tol {
            break;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IWareConfig {
    pub num_thresholds: usize,
    pub learner: LearnerKind,
    pub folds: usize,
    pub weights: WeightConfig,
}

impl Default for IWareConfig {
    fn default() -> Self {
        Self {
            num_thresholds: 10,
            learner: LearnerKind::default(),
            folds: 5,
            weights: WeightConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IWareEnsemble {
    version: u32,
    thresholds: ThresholdSet,
    weights: Vec<f64>,
    learners: Vec<Learner>,
    learner_kind: LearnerKind,
    squash_scale: f64,
}

/// Query for the ensemble: design row (features then previous effort) and a
/// hypothetical effort in km.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskQuery {
    pub features: Vec<f64>,
    pub effort: f64,
}

/// Mixture of qualified member predictions at effort `c`; returns the
/// probability and raw variance.
pub fn combine_qualified(
    thresholds: &ThresholdSet,
    weights: &[f64],
    preds: &[Prediction],
    c: f64,
) -> (f64, f64) {
    let q = thresholds.qualified(c);
    let total: f64 = weights[..q].iter().sum();
    let norm: Vec<f64> = if total > 0.0 {
        weights[..q].iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / q as f64; q]
    };
    let mean: f64 = norm.iter().zip(preds).map(|(w, p)| w * p.prob).sum();
    let second: f64 = norm
        .iter()
        .zip(preds)
        .map(|(w, p)| w * (p.variance.unwrap_or(0.0) + p.prob * p.prob))
        .sum();
    (mean.clamp(0.0, 1.0), (second - mean * mean).max(0.0))
}

/// `2σ(ν/s) - 1`, mapping `[0, ∞)` onto `[0, 1)`.
pub fn squash_uncertainty(raw: f64, scale: f64) -> f64 {
    let x = raw.max(0.0) / scale;
    // 2/(1+e^{-x}) - 1 = tanh(x/2), kept strictly below 1.
    (0.5 * x).tanh().min(1.0 - f64::EPSILON / 2.0)
}

/// Trains one learner per threshold. All members share `seed` and draw from
/// one pool (the θ = 0 rows, optionally restricted by `rows_subset`), so
/// their differences reflect the filtering rather than sampling noise.
fn train_members(
    ds: &PatrolDataset,
    thresholds: &ThresholdSet,
    kind: &LearnerKind,
    rows_subset: Option<&[bool]>,
    seed: u64,
) -> Result<Vec<Learner>> {
    let all: Vec<_> = ds.rows().collect();
    let pool: Vec<usize> = filter_indices(ds, 0.0)
        .into_iter()
        .filter(|&i| rows_subset.map_or(true, |m| m[i]))
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyFilter(0.0));
    }
    let data = TrainMatrix::with_ids(
        pool.iter().map(|&i| ds.design_row(all[i].t, all[i].cell)).collect(),
        pool.iter().map(|&i| all[i].label).collect(),
        pool.clone(),
    )?;
    thresholds
        .as_slice()
        .par_iter()
        .map(|&theta| {
            let eligible: Vec<bool> = pool.iter().map(|&i| all[i].label || all[i].effort > theta).collect();
            if !eligible.iter().any(|&e| e) {
                return Err(Error::EmptyFilter(theta));
            }
            Learner::train_on(kind, &data, &eligible, &mut ChaCha8Rng::seed_from_u64(seed))
        })
        .collect()
}

/// Stratified fold assignment of the patrolled rows: positives and
/// negatives are each shuffled and dealt round-robin.
fn assign_folds<R: Rng + ?Sized>(labels: &[bool], folds: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut fold = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold[i] = k % folds;
        }
    }
    fold
}

pub fn train_iware<R: Rng + ?Sized>(
    ds: &PatrolDataset,
    cfg: &IWareConfig,
    rng: &mut R,
) -> Result<IWareEnsemble> {
    let thresholds = select_thresholds(ds, cfg.num_thresholds)?;
    let m = thresholds.len();
    if cfg.learner.needs_positive() && ds.positive_count() == 0 {
        return Err(Error::NoPositives);
    }
    let final_seed: u64 = rng.gen();
    let weights = if m == 1 {
        vec![1.0]
    } else {
        let folds = cfg.folds.max(2);
        let rows: Vec<_> = ds.rows().collect();
        let patrolled: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].effort > 0.0).collect();
        let labels: Vec<bool> = patrolled.iter().map(|&i| rows[i].label).collect();
        let qualified: Vec<usize> = patrolled.iter().map(|&i| thresholds.qualified(rows[i].effort)).collect();
        let fold_of = assign_folds(&labels, folds, rng);
        let fold_seeds: Vec<u64> = (0..folds).map(|_| rng.gen()).collect();
        let mut cv = vec![vec![0.0; patrolled.len()]; m];
        for k in 0..folds {
            let mut train_mask = vec![true; rows.len()];
            let mut val = Vec::new();
            for (j, &i) in patrolled.iter().enumerate() {
                if fold_of[j] == k {
                    train_mask[i] = false;
                    val.push(j);
                }
            }
            if val.is_empty() {
                continue;
            }
            let members = train_members(ds, &thresholds, &cfg.learner, Some(&train_mask), fold_seeds[k])?;
            let xs: Vec<Vec<f64>> = val
                .iter()
                .map(|&j| ds.design_row(rows[patrolled[j]].t, rows[patrolled[j]].cell))
                .collect();
            for (i, learner) in members.iter().enumerate() {
                for (x, &j) in xs.iter().zip(&val) {
                    cv[i][j] = learner.predict(x)?.prob;
                }
            }
        }
        optimize_weights_qualified(&cv, &labels, &qualified, &cfg.weights)?
    };
    let learners = train_members(ds, &thresholds, &cfg.learner, None, final_seed)?;
    let mut ens = IWareEnsemble {
        version: MODEL_VERSION,
        thresholds,
        weights,
        learners,
        learner_kind: cfg.learner,
        squash_scale: 1.0,
    };
    let ev = patrolled_rows(ds);
    let raw: Vec<f64> = ev
        .features
        .par_iter()
        .zip(&ev.efforts)
        .map(|(x, &c)| ens.predict_raw(x, c).map(|(_, v)| v))
        .collect::<Result<_>>()?;
    ens.squash_scale = squash_scale_from(&raw);
    Ok(ens)
}

/// Median of the raw variances; the median of the strictly positive ones if
/// that is zero; 1.0 if there are none.
pub fn squash_scale_from(raw: &[f64]) -> f64 {
    let median = |mut v: Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(quantile_sorted(&v, 0.5))
    };
    match median(raw.to_vec()) {
        Some(m) if m > 0.0 => m,
        _ => median(raw.iter().copied().filter(|&v| v > 0.0).collect()).unwrap_or(1.0),
    }
}

impl IWareEnsemble {
    pub fn from_parts(
        thresholds: ThresholdSet,
        weights: Vec<f64>,
        learners: Vec<Learner>,
        learner_kind: LearnerKind,
        squash_scale: f64,
    ) -> Result<Self> {
        if learners.len() != thresholds.len() || weights.len() != thresholds.len() {
            return Err(Error::Shape("one learner and one weight per threshold".into()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("weights must lie on the simplex".into()));
        }
        if !(squash_scale > 0.0) {
            return Err(Error::InvalidInput("squash scale must be positive".into()));
        }
        Ok(Self {
            version: MODEL_VERSION,
            thresholds,
            weights,
            learners,
            learner_kind,
            squash_scale,
        })
    }

    pub fn thresholds(&self) -> &ThresholdSet {
        &self.thresholds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn learner_kind(&self) -> &LearnerKind {
        &self.learner_kind
    }

    pub fn squash_scale(&self) -> f64 {
        self.squash_scale
    }

    pub fn num_features(&self) -> usize {
        self.learners[0].num_features()
    }

    /// Every member's prediction at `x`, in threshold order.
    pub fn member_predictions(&self, x: &[f64]) -> Result<Vec<Prediction>> {
        self.learners.iter().map(|l| l.predict(x)).collect()
    }

    /// Probability and unsquashed variance at effort `c`.
    pub fn predict_raw(&self, x: &[f64], c: f64) -> Result<(f64, f64)> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidInput(format!("effort {c} must be finite and nonnegative")));
        }
        let q = self.thresholds.qualified(c);
        let preds = self.learners[..q]
            .iter()
            .map(|l| l.predict(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(combine_qualified(&self.thresholds, &self.weights, &preds, c))
    }

    /// Probability `g(c)` and squashed uncertainty `ν(c) ∈ [0,1)`.
    pub fn predict_effort_conditioned(&self, q: &RiskQuery) -> Result<(f64, f64)> {
        let (g, v) = self.predict_raw(&q.features, q.effort)?;
        Ok((g, self.squash(v)))
    }

    pub fn squash(&self, raw: f64) -> f64 {
        squash_uncertainty(raw, self.squash_scale)
    }

    /// Probabilities for a batch of rows at their own efforts.
    pub fn predict_batch(&self, xs: &[Vec<f64>], efforts: &[f64]) -> Result<Vec<(f64, f64)>> {
        if xs.len() != efforts.len() {
            return Err(Error::Shape("one effort per row".into()));
        }
        xs.par_iter()
            .zip(efforts)
            .map(|(x, &c)| self.predict_raw(x, c))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let h: Header = serde_json::from_str(s)?;
        if h.version != MODEL_VERSION {
            return Err(Error::Version(h.version));
        }
        Ok(serde_json::from_str(s)?)
    }
}
