//! Branch-and-bound over the `λ` relaxation.
//!
//! The binary selectors only enforce that each cell's `λ` uses two adjacent
//! breakpoints. Dropping them gives an LP whose value per cell is the concave
//! envelope of the utility; branching restricts a cell's `λ` to breakpoints
//! `≤ r` or `≥ r`. A node whose LP value per cell already equals the true
//! utility at its coverage needs no branching, whatever its `λ` support.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::error::{PlanError, Result};
use crate::milp::{MilpModel, Sense};
use crate::simplex::{solve_lp_warm, Lp, LpOutcome, WarmStart};

const ENVELOPE_TOL: f64 = 1e-9;
/// Memory allowed for parent tableaux kept to warm-start open nodes.
const WARM_BUDGET_BYTES: usize = 512 << 20;

#[derive(Debug, Clone)]
pub struct BnbSolution {
    /// Continuous variables: flows then `λ`.
    pub x: Vec<f64>,
    /// Model objective of `x` with utilities evaluated exactly.
    pub objective: f64,
    /// Best remaining LP bound when the search stopped.
    pub bound: f64,
    pub nodes: usize,
}

struct Node {
    bound: f64,
    id: usize,
    /// Allowed breakpoint range per group, inclusive.
    ranges: Vec<(usize, usize)>,
    warm: Option<Arc<WarmStart>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    /// Highest bound first; earlier nodes first among equals.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then_with(|| other.id.cmp(&self.id))
    }
}

fn relaxation(model: &MilpModel) -> Lp {
    let n = model.num_continuous;
    let rows: Vec<_> = model.continuous_rows().collect();
    debug_assert!(rows.iter().all(|r| r.sense == Sense::Eq));
    let mut a = vec![0.0; rows.len() * n];
    for (i, r) in rows.iter().enumerate() {
        for &(j, c) in &r.coefs {
            a[i * n + j] += c;
        }
    }
    Lp {
        num_vars: n,
        a,
        b: rows.iter().map(|r| r.rhs).collect(),
        c: model.objective[..n].to_vec(),
        upper: model.upper[..n].to_vec(),
    }
}

fn interpolate(bp: &[f64], vals: &[f64], c: f64) -> f64 {
    if c <= bp[0] {
        return vals[0];
    }
    let last = bp.len() - 1;
    if c >= bp[last] {
        return vals[last];
    }
    let k = bp.partition_point(|&b| b <= c) - 1;
    let t = (c - bp[k]) / (bp[k + 1] - bp[k]);
    vals[k] + t * (vals[k + 1] - vals[k])
}

/// Exact objective of a continuous point and the per-group envelope gaps.
fn assess(model: &MilpModel, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let bp = &model.breakpoints;
    let mut obj: f64 = (0..model.num_flow).map(|e| model.objective[e] * x[e]).sum();
    let mut gaps = Vec::with_capacity(model.groups.len());
    let mut cover = Vec::with_capacity(model.groups.len());
    for g in &model.groups {
        let lam: Vec<f64> = g.lambda.iter().map(|&l| x[l]).collect();
        let c: f64 = lam.iter().zip(bp).map(|(l, b)| l * b).sum();
        let lp: f64 = lam.iter().zip(&g.values).map(|(l, u)| l * u).sum();
        let exact = interpolate(bp, &g.values, c);
        obj += exact;
        gaps.push(lp - exact);
        cover.push(c);
    }
    (obj, gaps, cover)
}

pub fn branch_and_bound(model: &MilpModel, gap: f64, node_limit: usize) -> Result<BnbSolution> {
    let base = relaxation(model);
    let nb = model.breakpoints.len();
    let forbidden = |ranges: &[(usize, usize)]| -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (g, &(lo, hi)) in model.groups.iter().zip(ranges) {
            for (j, &l) in g.lambda.iter().enumerate() {
                if j < lo || j > hi {
                    out.push((l, 0.0));
                }
            }
        }
        out
    };
    type Solved = Option<(Vec<f64>, f64, Option<WarmStart>)>;
    let solve = |ranges: &[(usize, usize)], warm: Option<&WarmStart>| -> Result<Solved> {
        let (outcome, tableau) = match warm {
            Some(w) => w.resolve(&forbidden(ranges))?,
            None => {
                let mut lp = base.clone();
                for (l, u) in forbidden(ranges) {
                    lp.upper[l] = u;
                }
                solve_lp_warm(&lp)?
            }
        };
        match outcome {
            LpOutcome::Optimal { x, objective } => Ok(Some((x, objective, tableau))),
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(PlanError::Numerical("bounded relaxation reported unbounded".into())),
        }
    };
    let root = vec![(0, nb - 1); model.groups.len()];
    let Some((x0, b0, t0)) = solve(&root, None)? else {
        return Err(PlanError::Infeasible("no patrol satisfies the flow constraints".into()));
    };
    // Nodes whose parent tableau was not kept re-solve from the root's instead.
    let root_warm = t0.clone().map(Arc::new);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut heap = BinaryHeap::new();
    let mut pending = vec![(x0, b0, root, t0)];
    let mut next_id = 0usize;
    let mut explored = 0usize;
    let open_bound;
    loop {
        for (x, bound, ranges, tableau) in pending.drain(..) {
            let (exact, gaps, cover) = assess(model, &x);
            if best.as_ref().map_or(true, |b| exact > b.1) {
                best = Some((x.clone(), exact));
            }
            let worst = gaps
                .iter()
                .enumerate()
                .filter(|(_, &g)| g > ENVELOPE_TOL)
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
            let Some((gi, _)) = worst else { continue };
            if bound <= best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1) + gap {
                continue;
            }
            let grp = &model.groups[gi];
            let support: Vec<usize> = (ranges[gi].0..=ranges[gi].1).filter(|&j| x[grp.lambda[j]] > 1e-12).collect();
            let (lo, hi) = (support[0], *support.last().expect("λ sums to one"));
            if hi <= lo + 1 {
                continue;
            }
            let nearest = model.breakpoints.partition_point(|&b| b < cover[gi]);
            let r = nearest.clamp(lo + 1, hi - 1);
            let warm = tableau
                .filter(|t| t.bytes() * (heap.len() / 2 + 1) <= WARM_BUDGET_BYTES)
                .map(Arc::new);
            for child in [(ranges[gi].0, r), (r, ranges[gi].1)] {
                let mut cr = ranges.clone();
                cr[gi] = child;
                heap.push(Node { bound, id: next_id, ranges: cr, warm: warm.clone() });
                next_id += 1;
            }
        }
        let incumbent = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
        let Some(node) = heap.pop() else {
            open_bound = incumbent;
            break;
        };
        if node.bound <= incumbent + gap {
            open_bound = incumbent.max(node.bound);
            break;
        }
        explored += 1;
        if explored > node_limit {
            open_bound = node.bound;
            log::warn!("branch-and-bound stopped after {node_limit} nodes with bound {} vs {incumbent}", node.bound);
            break;
        }
        if let Some((x, b, t)) = solve(&node.ranges, node.warm.as_deref().or(root_warm.as_deref()))? {
            pending.push((x, b.min(node.bound), node.ranges, t));
        }
    }
    let (x, objective) = best.expect("root produced an incumbent");
    Ok(BnbSolution { x, objective, bound: open_bound.max(objective), nodes: explored + 1 })
}
