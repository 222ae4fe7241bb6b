//! Exhaustive search over pure patrols (single source-to-sink walks).
//!
//! A mixed patrol's objective is a function of its coverage, which is linear
//! in the flow. When every utility is convex that function is convex, so its
//! maximum over the flow polytope sits at a vertex, i.e. a pure walk. Only
//! then is enumeration an exact solver.

use crate::error::{PlanError, Result};
use crate::milp::PlanProblem;

pub const DEFAULT_PATH_LIMIT: usize = 100_000;

#[derive(Debug, Clone)]
pub struct EnumeratedPath {
    pub edges: Vec<usize>,
    pub objective: f64,
    pub num_paths: usize,
}

/// Best pure patrol; ties keep the walk found first in ascending edge order.
pub fn best_path(p: &PlanProblem, limit: usize) -> Result<EnumeratedPath> {
    let g = &p.graph;
    let count = g.count_paths();
    if count > limit as f64 {
        return Err(PlanError::TooManyPaths { count, limit });
    }
    let horizon = g.horizon();
    let cells = g.cells();
    let slot = {
        let mut s = vec![usize::MAX; g.num_cells()];
        for (i, &v) in cells.iter().enumerate() {
            s[v] = i;
        }
        s
    };
    // table[i][n]: utility of cell i after n visits.
    let table: Vec<Vec<f64>> = cells
        .iter()
        .map(|&v| {
            (0..=horizon)
                .map(|n| p.pwl.eval_utility(v, (n * p.k) as f64, p.beta).expect("checked"))
                .collect()
        })
        .collect();
    let mut visits = vec![0usize; cells.len()];
    visits[slot[g.post()]] = 1;
    let score = |visits: &[usize]| -> f64 { visits.iter().zip(&table).map(|(&n, t)| t[n]).sum() };
    if horizon == 1 {
        return Ok(EnumeratedPath { edges: vec![], objective: score(&visits), num_paths: 1 });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut path: Vec<usize> = Vec::with_capacity(horizon - 1);
    // Stack of (node, next out-edge position).
    let mut stack = vec![(g.source(), 0usize)];
    let mut seen = 0usize;
    while let Some(top) = stack.len().checked_sub(1) {
        let (node, pos) = stack[top];
        if node == g.sink() && pos == 0 {
            seen += 1;
            let s = score(&visits);
            if best.as_ref().map_or(true, |b| s > b.1) {
                best = Some((path.clone(), s));
            }
        }
        let outs = g.out_edges(node);
        if pos < outs.len() {
            stack[top].1 += 1;
            let e = outs[pos];
            path.push(e);
            // Each edge counts the cell it leaves; the sink is pre-counted.
            visits[slot[g.nodes()[node].cell]] += 1;
            stack.push((g.edges()[e].to, 0));
        } else {
            stack.pop();
            if let Some(e) = path.pop() {
                visits[slot[g.nodes()[g.edges()[e].from].cell]] -= 1;
            }
        }
    }
    let (edges, objective) = best.ok_or_else(|| PlanError::Infeasible("no walk returns to the post".into()))?;
    Ok(EnumeratedPath { edges, objective, num_paths: seen })
}
