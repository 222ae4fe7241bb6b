//! Time-unrolled patrol graph.
//!
//! A patrol is a walk of `T` cells starting and ending at the post, moving to
//! a 4-neighbour or staying put at every step. Node `(v, t)` is kept only if
//! some such walk passes through it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use snaremap_core::griddata::ParkGrid;

use crate::error::{PlanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub cell: usize,
    /// Zero-based time step.
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeUnrolledGraph {
    num_cells: usize,
    post: usize,
    horizon: usize,
    /// Ordered by `(t, cell)`.
    nodes: Vec<Node>,
    /// Ordered by `(from, to)`; every edge advances time by one.
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    /// Distinct cells appearing in some node, ascending.
    cells: Vec<usize>,
}

/// Hop distances from `src` over masked cells; `usize::MAX` if unreachable.
pub fn hop_distances(grid: &ParkGrid, src: usize) -> Vec<usize> {
    let mut d = vec![usize::MAX; grid.num_cells()];
    d[src] = 0;
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for v in grid.neighbors(u) {
            if d[v] == usize::MAX {
                d[v] = d[u] + 1;
                q.push_back(v);
            }
        }
    }
    d
}

pub fn build_graph(grid: &ParkGrid, post: usize, horizon: usize) -> Result<TimeUnrolledGraph> {
    if horizon < 1 {
        return Err(PlanError::InvalidInput("horizon T must be at least 1".into()));
    }
    if post >= grid.num_cells() || !grid.is_masked(post) {
        return Err(PlanError::InvalidInput(format!("post {post} is not a cell inside the park")));
    }
    if !grid.patrol_posts().contains(&post) {
        return Err(PlanError::InvalidInput(format!("cell {post} is not a patrol post")));
    }
    let dist = hop_distances(grid, post);
    // (v, t) lies on a walk iff it is reachable by t and can return by T−1.
    let alive = |v: usize, t: usize| dist[v] != usize::MAX && dist[v] <= t && dist[v] <= horizon - 1 - t;
    let mut nodes = Vec::new();
    let mut index = vec![vec![usize::MAX; grid.num_cells()]; horizon];
    for (t, layer) in index.iter_mut().enumerate() {
        for v in 0..grid.num_cells() {
            if alive(v, t) {
                layer[v] = nodes.len();
                nodes.push(Node { cell: v, t });
            }
        }
    }
    let mut edges = Vec::new();
    for (id, n) in nodes.iter().enumerate() {
        if n.t + 1 == horizon {
            continue;
        }
        let mut next = grid.neighbors(n.cell);
        next.push(n.cell);
        next.sort_unstable();
        for v in next {
            let to = index[n.t + 1][v];
            if to != usize::MAX {
                edges.push(Edge { from: id, to });
            }
        }
    }
    let mut out_edges = vec![Vec::new(); nodes.len()];
    let mut in_edges = vec![Vec::new(); nodes.len()];
    for (e, edge) in edges.iter().enumerate() {
        out_edges[edge.from].push(e);
        in_edges[edge.to].push(e);
    }
    let mut cells: Vec<usize> = nodes.iter().map(|n| n.cell).collect();
    cells.sort_unstable();
    cells.dedup();
    Ok(TimeUnrolledGraph {
        num_cells: grid.num_cells(),
        post,
        horizon,
        nodes,
        edges,
        out_edges,
        in_edges,
        cells,
    })
}

impl TimeUnrolledGraph {
    /// Cell count of the underlying grid, including masked-out cells.
    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn post(&self) -> usize {
        self.post
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    /// Cells a patrol can visit.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn sink(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Number of source-to-sink walks, saturating in `f64`.
    pub fn count_paths(&self) -> f64 {
        let mut ways = vec![0.0f64; self.nodes.len()];
        ways[self.source()] = 1.0;
        for e in &self.edges {
            ways[e.to] += ways[e.from];
        }
        ways[self.sink()]
    }

    /// Per-cell visit mass `Σ_t throughput(v, t)` for a unit flow on the edges.
    /// The sink contributes its unit inflow, so the total is `T`.
    pub fn visits(&self, flow: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_cells];
        for (e, edge) in self.edges.iter().enumerate() {
            out[self.nodes[edge.from].cell] += flow[e];
        }
        out[self.post] += 1.0;
        out
    }

    /// Cells of the walk given by consecutive edge ids.
    pub fn path_cells(&self, edge_path: &[usize]) -> Vec<usize> {
        let mut cells = vec![self.post];
        cells.extend(edge_path.iter().map(|&e| self.nodes[self.edges[e].to].cell));
        cells
    }
}
