use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features considered per split; `None` means all of them.
    pub feature_subsample: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 8,
            min_leaf: 25,
            feature_subsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// CART classifier. Node 0 is the root; rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    num_features: usize,
    max_depth: usize,
}

impl DecisionTree {
    pub fn constant(value: f64, num_features: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf {
                value: value.clamp(0.0, 1.0),
            }],
            num_features,
            max_depth: 0,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.num_features {
            return Err(Error::Dimension {
                expected: self.num_features,
                got: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Fits a tree on every row of `data` once.
pub fn train_tree<R: Rng + ?Sized>(
    data: &TrainMatrix,
    cfg: &TreeConfig,
    rng: &mut R,
) -> Result<DecisionTree> {
    let idx: Vec<usize> = (0..data.len()).collect();
    train_tree_on(data, &idx, cfg, rng)
}

/// Fits a tree on a multiset of row indices (repeats count as weight).
pub fn train_tree_on<R: Rng + ?Sized>(
    data: &TrainMatrix,
    sample: &[usize],
    cfg: &TreeConfig,
    rng: &mut R,
) -> Result<DecisionTree> {
    let min_leaf = cfg.min_leaf.max(1);
    if sample.len() < min_leaf {
        return Err(Error::InvalidInput(format!(
            "{} rows cannot fill a leaf of {min_leaf}",
            sample.len()
        )));
    }
    let mut builder = Builder {
        data,
        cfg: TreeConfig { min_leaf, ..*cfg },
        nodes: Vec::new(),
    };
    let mut sample = sample.to_vec();
    builder.grow(&mut sample, 0, rng);
    Ok(DecisionTree {
        nodes: builder.nodes,
        num_features: data.num_features(),
        max_depth: cfg.max_depth,
    })
}

struct Builder<'a> {
    data: &'a TrainMatrix,
    cfg: TreeConfig,
    nodes: Vec<Node>,
}

struct BestSplit {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    fn grow<R: Rng + ?Sized>(&mut self, sample: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let n = sample.len();
        let pos = sample.iter().filter(|&&i| self.data.labels[i]).count();
        let value = pos as f64 / n as f64;
        if depth >= self.cfg.max_depth || pos == 0 || pos == n || n < 2 * self.cfg.min_leaf {
            self.nodes[id] = Node::Leaf { value };
            return id;
        }
        let Some(best) = self.best_split(sample, pos, rng) else {
            self.nodes[id] = Node::Leaf { value };
            return id;
        };
        let (f, thr) = (best.feature, best.threshold);
        let rows = &self.data.rows;
        let mut split = 0;
        for k in 0..n {
            if rows[sample[k]][f] <= thr {
                sample.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = sample.split_at_mut(split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: f,
            threshold: thr,
            left,
            right,
        };
        id
    }

    /// Lowest weighted child Gini; ties keep the lowest feature, then the lowest threshold.
    fn best_split<R: Rng + ?Sized>(
        &self,
        sample: &[usize],
        pos_total: usize,
        rng: &mut R,
    ) -> Option<BestSplit> {
        let d = self.data.num_features();
        let mut features: Vec<usize> = (0..d).collect();
        if let Some(m) = self.cfg.feature_subsample {
            if m < d {
                features.shuffle(rng);
                features.truncate(m.max(1));
                features.sort_unstable();
            }
        }
        let n = sample.len();
        let min_leaf = self.cfg.min_leaf;
        let rows = &self.data.rows;
        let labels = &self.data.labels;
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<(f64, bool)> = Vec::with_capacity(n);
        for &f in &features {
            order.clear();
            order.extend(sample.iter().map(|&i| (rows[i][f], labels[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0usize;
            for k in 0..n - 1 {
                if order[k].1 {
                    left_pos += 1;
                }
                let nl = k + 1;
                if order[k].0 == order[k + 1].0 || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let nr = n - nl;
                let right_pos = pos_total - left_pos;
                let imp = (nl as f64 * gini(left_pos as f64, nl as f64)
                    + nr as f64 * gini(right_pos as f64, nr as f64))
                    / n as f64;
                if best.as_ref().map_or(true, |b| imp < b.impurity - 1e-12) {
                    let lo = order[k].0;
                    let hi = order[k + 1].0;
                    let mut threshold = lo + 0.5 * (hi - lo);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        impurity: imp,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}
