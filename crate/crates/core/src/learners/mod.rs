//! Weak learners for the ensemble.

pub mod bagging;
pub mod gp;
pub mod tree;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bagging::{train_bagged, train_bagged_on, BaggedClassifier, BaggingConfig};
pub use gp::{train_gp, GpClassifier, GpConfig};
pub use tree::{train_tree, DecisionTree, TreeConfig};

use crate::error::{Error, Result};

/// Training rows with boolean labels. `row_ids` identify rows in the source
/// dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMatrix {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub row_ids: Vec<usize>,
}

impl TrainMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        let ids = (0..rows.len()).collect();
        Self::with_ids(rows, labels, ids)
    }

    pub fn with_ids(rows: Vec<Vec<f64>>, labels: Vec<bool>, row_ids: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("training matrix has no rows".into()));
        }
        if rows.len() != labels.len() || rows.len() != row_ids.len() {
            return Err(Error::Shape("rows, labels and ids differ in length".into()));
        }
        let d = rows[0].len();
        for r in &rows {
            if r.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite training value".into()));
            }
        }
        Ok(Self {
            rows,
            labels,
            row_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.rows[0].len()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::with_ids(
            idx.iter().map(|&i| self.rows[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.row_ids[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    /// Bagged CART trees; variance from the infinitesimal jackknife.
    BaggedTrees(BaggingConfig),
    /// One GP classifier on a stratified subsample.
    Gp(GpConfig),
    /// GP classifiers on independent balanced subsamples.
    BaggedGp {
        num_bags: usize,
        balanced: bool,
        gp: GpConfig,
    },
}

impl Default for LearnerKind {
    fn default() -> Self {
        LearnerKind::BaggedTrees(BaggingConfig::default())
    }
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::BaggedTrees(_) => "bagged_trees",
            LearnerKind::Gp(_) => "gp",
            LearnerKind::BaggedGp { .. } => "bagged_gp",
        }
    }

    /// Whether training needs at least one positive row.
    pub fn needs_positive(&self) -> bool {
        match self {
            LearnerKind::BaggedTrees(c) => c.balanced,
            LearnerKind::Gp(_) => false,
            LearnerKind::BaggedGp { balanced, .. } => *balanced,
        }
    }
}

/// Probability with an optional variance in probability units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub prob: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Learner {
    BaggedTrees(BaggedClassifier),
    Gp(GpClassifier),
    BaggedGp(Vec<GpClassifier>),
}

/// Relative rate at which `kept` sampled negatives versus positives from
/// `labels`; `None` when the class mix is unchanged or a class is missing.
pub(crate) fn sampling_rate(labels: &[bool], kept: &[usize]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let kept_pos = kept.iter().filter(|&&i| labels[i]).count();
    let kept_neg = kept.len() - kept_pos;
    if pos == 0 || neg == 0 || kept_pos == 0 || kept_neg == 0 {
        return None;
    }
    let rate = (kept_neg as f64 / neg as f64) / (kept_pos as f64 / pos as f64);
    ((rate - 1.0).abs() > 1e-12).then_some(rate)
}

/// Undersampling prior correction `p = βs / (βs − s + 1)` and its slope.
pub fn prior_correct(s: f64, beta: f64) -> (f64, f64) {
    let den = beta * s - s + 1.0;
    ((beta * s / den).clamp(0.0, 1.0), beta / (den * den))
}

/// Latent variance mapped to probability units by the delta method, after
/// any prior correction for the training subsample.
fn gp_prob_variance(gp: &GpClassifier, x: &[f64]) -> Result<(f64, f64)> {
    let (s, v) = gp.predict(x)?;
    let v = (s * (1.0 - s)).powi(2) * v;
    Ok(match gp.negative_rate() {
        None => (s, v),
        Some(beta) => {
            let (p, slope) = prior_correct(s, beta);
            (p, v * slope * slope)
        }
    })
}

impl Learner {
    pub fn train<R: Rng + ?Sized>(kind: &LearnerKind, data: &TrainMatrix, rng: &mut R) -> Result<Self> {
        match kind {
            LearnerKind::BaggedTrees(cfg) => Ok(Learner::BaggedTrees(train_bagged(data, cfg, rng)?)),
            LearnerKind::Gp(cfg) => Ok(Learner::Gp(train_gp(data, cfg, rng)?)),
            LearnerKind::BaggedGp {
                num_bags,
                balanced,
                gp,
            } => {
                if *num_bags == 0 {
                    return Err(Error::InvalidInput("bagged GP needs at least one bag".into()));
                }
                if *balanced && data.num_positives() == 0 {
                    return Err(Error::NoPositives);
                }
                let seeds: Vec<u64> = (0..*num_bags).map(|_| rng.gen()).collect();
                let models = seeds
                    .par_iter()
                    .map(|&s| {
                        let mut r = ChaCha8Rng::seed_from_u64(s);
                        let mut bag = bagging::draw_bag(&data.labels, *balanced, 1.0, &mut r);
                        bag.sort_unstable();
                        bag.dedup();
                        let mut m = train_gp(&data.subset(&bag)?, gp, &mut r)?;
                        let inner = m.negative_rate().unwrap_or(1.0);
                        m.set_negative_rate(
                            sampling_rate(&data.labels, &bag).map(|b| b * inner).or(m.negative_rate()),
                        );
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Learner::BaggedGp(models))
            }
        }
    }

    /// Trains on the rows of `data` with `eligible[i]`. Bagged trees draw
    /// their bags from `data` directly, so learners trained on nested
    /// eligible sets with equal seeds share their common draws.
    pub fn train_on<R: Rng + ?Sized>(
        kind: &LearnerKind,
        data: &TrainMatrix,
        eligible: &[bool],
        rng: &mut R,
    ) -> Result<Self> {
        if eligible.len() != data.len() {
            return Err(Error::Shape("eligibility mask does not match the rows".into()));
        }
        match kind {
            LearnerKind::BaggedTrees(cfg) => Ok(Learner::BaggedTrees(train_bagged_on(data, Some(eligible), cfg, rng)?)),
            _ => {
                let idx: Vec<usize> = (0..data.len()).filter(|&i| eligible[i]).collect();
                Self::train(kind, &data.subset(&idx)?, rng)
            }
        }
    }

    pub fn num_features(&self) -> usize {
        match self {
            Learner::BaggedTrees(m) => m.num_features(),
            Learner::Gp(m) => m.num_features(),
            Learner::BaggedGp(ms) => ms[0].num_features(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        match self {
            Learner::BaggedTrees(m) => {
                let (prob, variance) = m.predict_with_variance(x)?;
                Ok(Prediction { prob, variance })
            }
            Learner::Gp(m) => {
                let (prob, v) = gp_prob_variance(m, x)?;
                Ok(Prediction {
                    prob,
                    variance: Some(v),
                })
            }
            Learner::BaggedGp(ms) => {
                let parts = ms
                    .iter()
                    .map(|m| gp_prob_variance(m, x))
                    .collect::<Result<Vec<_>>>()?;
                let b = parts.len() as f64;
                let prob = parts.iter().map(|(p, _)| p).sum::<f64>() / b;
                let second = parts.iter().map(|(p, v)| v + p * p).sum::<f64>() / b;
                Ok(Prediction {
                    prob,
                    variance: Some((second - prob * prob).max(0.0)),
                })
            }
        }
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}
