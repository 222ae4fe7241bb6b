use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{train_tree_on, DecisionTree, TreeConfig};
use super::TrainMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaggingConfig {
    pub num_trees: usize,
    pub balanced: bool,
    /// Negatives drawn per positive when `balanced`.
    pub undersample_ratio: f64,
    /// Map balanced-bag probabilities back to the training class prior.
    #[serde(default = "yes")]
    pub prior_correction: bool,
    pub tree: TreeConfig,
}

fn yes() -> bool {
    true
}

impl Default for BaggingConfig {
    fn default() -> Self {
        Self {
            num_trees: 50,
            balanced: true,
            undersample_ratio: 1.0,
            prior_correction: true,
            tree: TreeConfig::default(),
        }
    }
}

/// Bagged trees with per-tree bootstrap counts kept for the infinitesimal
/// jackknife. `gram[b][b'] = Σ_j N_bj N_b'j` and `count_variance = Σ_j Var*(N_j)`
/// are precomputed so variance queries cost `O(B²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedClassifier {
    trees: Vec<DecisionTree>,
    /// Sparse `(row_id, count)` pairs per tree, ascending by row id.
    memberships: Vec<Vec<(usize, u32)>>,
    num_rows: usize,
    undersample_ratio: f64,
    balanced: bool,
    gram: Vec<f64>,
    count_variance: f64,
    /// Negative-to-positive sampling rate of the bags when prior correction
    /// applies; `None` means votes are already on the training prior.
    #[serde(default)]
    negative_rate: Option<f64>,
}

impl BaggedClassifier {
    /// Assembles a model from trees and their bootstrap counts (dense, one
    /// vector of length `num_rows` per tree).
    pub fn from_parts(trees: Vec<DecisionTree>, counts: Vec<Vec<u32>>) -> Result<Self> {
        if trees.is_empty() || trees.len() != counts.len() {
            return Err(Error::Shape("need one membership vector per tree".into()));
        }
        let n = counts[0].len();
        if counts.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("membership vectors differ in length".into()));
        }
        let d = trees[0].num_features();
        if trees.iter().any(|t| t.num_features() != d) {
            return Err(Error::Shape("trees disagree on feature count".into()));
        }
        let memberships = counts
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .filter(|(_, &k)| k > 0)
                    .map(|(j, &k)| (j, k))
                    .collect()
            })
            .collect();
        Ok(Self::assemble(trees, memberships, n, false, 1.0))
    }

    fn assemble(
        trees: Vec<DecisionTree>,
        memberships: Vec<Vec<(usize, u32)>>,
        num_rows: usize,
        balanced: bool,
        undersample_ratio: f64,
    ) -> Self {
        let b = trees.len();
        let mut gram = vec![0.0; b * b];
        for i in 0..b {
            for k in i..b {
                let g = sparse_dot(&memberships[i], &memberships[k]);
                gram[i * b + k] = g;
                gram[k * b + i] = g;
            }
        }
        let mut mean = vec![0.0; num_rows];
        let mut sq = 0.0;
        for m in &memberships {
            for &(j, k) in m {
                mean[j] += k as f64 / b as f64;
                sq += (k as f64).powi(2) / b as f64;
            }
        }
        let count_variance = (sq - mean.iter().map(|m| m * m).sum::<f64>()).max(0.0);
        Self {
            trees,
            memberships,
            num_rows,
            undersample_ratio,
            balanced,
            gram,
            count_variance,
            negative_rate: None,
        }
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn memberships(&self) -> &[Vec<(usize, u32)>] {
        &self.memberships
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_features(&self) -> usize {
        self.trees[0].num_features()
    }

    pub fn balanced(&self) -> bool {
        self.balanced
    }

    pub fn undersample_ratio(&self) -> f64 {
        self.undersample_ratio
    }

    /// Mean leaf fraction over trees, plus the individual tree outputs.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.num_features();
        if x.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let votes: Vec<f64> = self.trees.iter().map(|t| t.predict_unchecked(x)).collect();
        let p = votes.iter().sum::<f64>() / votes.len() as f64;
        Ok((p, votes))
    }

    /// Infinitesimal-jackknife variance of the bagged prediction from its tree votes.
    /// `None` for a single tree.
    pub fn jackknife_variance(&self, votes: &[f64]) -> Option<f64> {
        let b = self.trees.len();
        if b < 2 || votes.len() != b {
            return None;
        }
        let bf = b as f64;
        let mean = votes.iter().sum::<f64>() / bf;
        let dev: Vec<f64> = votes.iter().map(|v| v - mean).collect();
        let mut raw = 0.0;
        for i in 0..b {
            if dev[i] == 0.0 {
                continue;
            }
            let row = &self.gram[i * b..(i + 1) * b];
            raw += dev[i] * row.iter().zip(&dev).map(|(g, d)| g * d).sum::<f64>();
        }
        raw /= bf * bf;
        let spread = dev.iter().map(|d| d * d).sum::<f64>() / bf;
        let correction = self.count_variance * spread / bf;
        Some((raw - correction).max(0.0))
    }

    /// Vote share and IJ variance, mapped through the undersampling prior
    /// correction `p = βs / (βs − s + 1)` (variance by the delta method).
    pub fn predict_with_variance(&self, x: &[f64]) -> Result<(f64, Option<f64>)> {
        let (s, votes) = self.predict(x)?;
        let v = self.jackknife_variance(&votes);
        Ok(match self.negative_rate {
            None => (s, v),
            Some(beta) => {
                let (p, slope) = super::prior_correct(s, beta);
                (p, v.map(|v| v * slope * slope))
            }
        })
    }

    pub fn negative_rate(&self) -> Option<f64> {
        self.negative_rate
    }
}

fn sparse_dot(a: &[(usize, u32)], b: &[(usize, u32)]) -> f64 {
    let (mut i, mut k, mut s) = (0, 0, 0.0);
    while i < a.len() && k < b.len() {
        match a[i].0.cmp(&b[k].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => k += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 as f64 * b[k].1 as f64;
                i += 1;
                k += 1;
            }
        }
    }
    s
}

/// One uniform draw from the eligible members of `pool`, by rejection over
/// the whole pool. Bags drawn from nested eligible sets with one random
/// stream therefore share every draw the smaller set accepts.
fn draw_eligible<R: Rng + ?Sized>(pool: &[usize], eligible: Option<&[bool]>, rng: &mut R) -> usize {
    loop {
        let i = pool[rng.gen_range(0..pool.len())];
        if eligible.map_or(true, |e| e[i]) {
            return i;
        }
    }
}

fn count_eligible(labels: &[bool], eligible: Option<&[bool]>) -> (usize, usize) {
    let mut pos = 0;
    let mut all = 0;
    for (i, &y) in labels.iter().enumerate() {
        if eligible.map_or(true, |e| e[i]) {
            all += 1;
            pos += y as usize;
        }
    }
    (pos, all - pos)
}

/// Bootstrap indices for one bag. Balanced bags draw `|P|` positives and
/// `round(ratio·|P|)` negatives, both with replacement.
pub fn draw_bag<R: Rng + ?Sized>(
    labels: &[bool],
    balanced: bool,
    ratio: f64,
    rng: &mut R,
) -> Vec<usize> {
    draw_bag_from(labels, None, balanced, ratio, rng)
}

/// [`draw_bag`] restricted to rows with `eligible[i]`; callers guarantee the
/// classes being drawn have eligible members.
pub fn draw_bag_from<R: Rng + ?Sized>(
    labels: &[bool],
    eligible: Option<&[bool]>,
    balanced: bool,
    ratio: f64,
    rng: &mut R,
) -> Vec<usize> {
    let (num_pos, num_neg) = count_eligible(labels, eligible);
    if !balanced {
        let all: Vec<usize> = (0..labels.len()).collect();
        return (0..num_pos + num_neg).map(|_| draw_eligible(&all, eligible, rng)).collect();
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut bag: Vec<usize> = (0..num_pos).map(|_| draw_eligible(&pos, eligible, rng)).collect();
    if num_neg > 0 {
        let m = ((ratio * num_pos as f64).round() as usize).max(1);
        bag.extend((0..m).map(|_| draw_eligible(&neg, eligible, rng)));
    }
    bag
}

pub fn train_bagged<R: Rng + ?Sized>(
    data: &TrainMatrix,
    cfg: &BaggingConfig,
    rng: &mut R,
) -> Result<BaggedClassifier> {
    train_bagged_on(data, None, cfg, rng)
}

/// Bagging over the rows of `data` with `eligible[i]`; membership counts
/// keep indexing all of `data`, ineligible rows always count 0.
pub fn train_bagged_on<R: Rng + ?Sized>(
    data: &TrainMatrix,
    eligible: Option<&[bool]>,
    cfg: &BaggingConfig,
    rng: &mut R,
) -> Result<BaggedClassifier> {
    if cfg.num_trees == 0 {
        return Err(Error::InvalidInput("bagging needs at least one tree".into()));
    }
    if eligible.is_some_and(|e| e.len() != data.len()) {
        return Err(Error::Shape("eligibility mask does not match the rows".into()));
    }
    let (num_pos, num_neg) = count_eligible(&data.labels, eligible);
    if num_pos + num_neg == 0 {
        return Err(Error::InvalidInput("no eligible training rows".into()));
    }
    if cfg.balanced && num_pos == 0 {
        return Err(Error::NoPositives);
    }
    if !(cfg.undersample_ratio.is_finite() && cfg.undersample_ratio > 0.0) {
        return Err(Error::InvalidInput("undersample ratio must be positive".into()));
    }
    let seeds: Vec<u64> = (0..cfg.num_trees).map(|_| rng.gen()).collect();
    let fitted: Vec<(DecisionTree, Vec<(usize, u32)>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let bag = draw_bag_from(&data.labels, eligible, cfg.balanced, cfg.undersample_ratio, &mut r);
            let tree = if bag.len() < cfg.tree.min_leaf.max(1) {
                let pos = bag.iter().filter(|&&i| data.labels[i]).count();
                DecisionTree::constant(pos as f64 / bag.len().max(1) as f64, data.num_features())
            } else {
                train_tree_on(data, &bag, &cfg.tree, &mut r)?
            };
            let mut counts = bag;
            counts.sort_unstable();
            let mut sparse: Vec<(usize, u32)> = Vec::new();
            for j in counts {
                match sparse.last_mut() {
                    Some((last, k)) if *last == j => *k += 1,
                    _ => sparse.push((j, 1)),
                }
            }
            Ok((tree, sparse))
        })
        .collect::<Result<_>>()?;
    let (trees, memberships) = fitted.into_iter().unzip();
    let mut model = BaggedClassifier::assemble(
        trees,
        memberships,
        data.len(),
        cfg.balanced,
        cfg.undersample_ratio,
    );
    if cfg.balanced && cfg.prior_correction && num_neg > 0 {
        let drawn = ((cfg.undersample_ratio * num_pos as f64).round()).max(1.0);
        model.negative_rate = Some(drawn / num_neg as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn two_trees_average() {
        let m = BaggedClassifier::from_parts(
            vec![DecisionTree::constant(0.2, 1), DecisionTree::constant(0.8, 1)],
            vec![vec![1, 0], vec![0, 1]],
        )
        .unwrap();
        let (p, votes) = m.predict(&[0.0]).unwrap();
        assert_relative_eq!(p, 0.5);
        assert_eq!(votes, vec![0.2, 0.8]);
    }

    #[test]
    fn identical_trees_have_zero_variance() {
        let m = BaggedClassifier::from_parts(
            vec![DecisionTree::constant(0.3, 1); 4],
            vec![vec![2, 0, 1], vec![0, 1, 2], vec![1, 1, 1], vec![3, 0, 0]],
        )
        .unwrap();
        let (p, votes) = m.predict(&[1.0]).unwrap();
        assert_relative_eq!(p, 0.3);
        assert_eq!(m.jackknife_variance(&votes), Some(0.0));
    }

    #[test]
    fn single_tree_variance_undefined() {
        let m = BaggedClassifier::from_parts(vec![DecisionTree::constant(0.3, 1)], vec![vec![1]])
            .unwrap();
        let (_, votes) = m.predict(&[1.0]).unwrap();
        assert_eq!(m.jackknife_variance(&votes), None);
    }

    /// Direct evaluation of `Σ_j Cov*(N_j, t)²` minus the finite-B correction.
    #[test]
    fn hand_built_three_tree_example() {
        let counts = vec![vec![2u32, 1, 0], vec![0, 1, 2], vec![1, 1, 1]];
        let votes = [0.9, 0.1, 0.5];
        let m = BaggedClassifier::from_parts(
            votes.iter().map(|&v| DecisionTree::constant(v, 1)).collect(),
            counts.clone(),
        )
        .unwrap();
        // Cov_j: t̄ = 0.5, deviations (0.4, -0.4, 0).
        // N̄ = (1, 1, 1). Cov_0 = (1·0.4 + (-1)(-0.4) + 0)/3 = 0.8/3,
        // Cov_1 = 0, Cov_2 = ((-1)·0.4 + 1·(-0.4))/3 = -0.8/3.
        let raw = 2.0 * (0.8f64 / 3.0).powi(2);
        // Var*(N_j) = (2/3, 0, 2/3); spread = 0.32/3.
        let correction = (4.0 / 3.0) * (0.32 / 3.0) / 3.0;
        let v = m.jackknife_variance(&votes).unwrap();
        assert_relative_eq!(v, raw - correction, epsilon = 1e-15);
    }

    #[test]
    fn correction_larger_than_raw_is_floored() {
        // Memberships uncorrelated with the votes make the raw sum vanish.
        let counts = vec![vec![1u32, 1], vec![1, 1], vec![2, 0], vec![0, 2]];
        let votes = [0.0, 1.0, 0.5, 0.5];
        let m = BaggedClassifier::from_parts(
            votes.iter().map(|&v| DecisionTree::constant(v, 1)).collect(),
            counts,
        )
        .unwrap();
        assert_eq!(m.jackknife_variance(&votes), Some(0.0));
    }

    #[test]
    fn balanced_bags_are_balanced() {
        let n = 1000;
        let labels: Vec<bool> = (0..n).map(|i| i % 100 == 0).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let data = TrainMatrix::new(rows, labels).unwrap();
        let cfg = BaggingConfig {
            num_trees: 10,
            ..BaggingConfig::default()
        };
        let m = train_bagged(&data, &cfg, &mut rng(1)).unwrap();
        for mem in m.memberships() {
            let pos: u32 = mem.iter().filter(|(j, _)| j % 100 == 0).map(|(_, k)| k).sum();
            let all: u32 = mem.iter().map(|(_, k)| k).sum();
            assert_eq!(pos, 10);
            assert_eq!(all, 20);
        }
    }

    #[test]
    fn balanced_without_positives_rejected() {
        let data = TrainMatrix::new(vec![vec![0.0], vec![1.0]], vec![false, false]).unwrap();
        let r = train_bagged(&data, &BaggingConfig::default(), &mut rng(0));
        assert!(matches!(r, Err(Error::NoPositives)));
    }

    #[test]
    fn one_unbalanced_tree_is_a_bootstrap_tree() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let data = TrainMatrix::new(rows, labels).unwrap();
        let cfg = BaggingConfig {
            num_trees: 1,
            balanced: false,
            ..BaggingConfig::default()
        };
        let m = train_bagged(&data, &cfg, &mut rng(9)).unwrap();
        let seed: u64 = rng(9).gen();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let bag = draw_bag(&data.labels, false, 1.0, &mut r);
        let tree = train_tree_on(&data, &bag, &cfg.tree, &mut r).unwrap();
        assert_eq!(m.trees()[0], tree);
    }

    #[test]
    fn prior_correction_restores_base_rate() {
        // Constant features: every tree predicts its bag's positive share 1/2.
        let n = 200;
        let labels: Vec<bool> = (0..n).map(|i| i % 10 == 0).collect();
        let data = TrainMatrix::new(vec![vec![0.0]; n], labels).unwrap();
        let m = train_bagged(&data, &BaggingConfig::default(), &mut rng(4)).unwrap();
        let beta = m.negative_rate().unwrap();
        assert!((beta - 20.0 / 180.0).abs() < 1e-12);
        let (p, _) = m.predict_with_variance(&[0.0]).unwrap();
        let (s, _) = m.predict(&[0.0]).unwrap();
        let expected = beta * s / (beta * s - s + 1.0);
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 0.1).abs() < 0.05, "{p}");
    }

    #[test]
    fn nested_eligibility_shares_accepted_draws() {
        let n = 300;
        let labels: Vec<bool> = (0..n).map(|i| i % 10 == 0).collect();
        let wide: Vec<bool> = vec![true; n];
        let narrow: Vec<bool> = (0..n).map(|i| labels[i] || i % 3 != 1).collect();
        let a = draw_bag_from(&labels, Some(&wide), true, 1.0, &mut rng(3));
        let b = draw_bag_from(&labels, Some(&narrow), true, 1.0, &mut rng(3));
        assert_eq!(a.len(), b.len());
        assert_eq!(a[..30], b[..30]);
        assert!(b.iter().all(|&i| narrow[i]));
        let shared = b[30..].iter().filter(|i| a[30..].contains(i)).count();
        assert!(shared >= 10, "{shared}");
        assert_eq!(draw_bag_from(&labels, None, true, 1.0, &mut rng(3)), a);
    }
}
