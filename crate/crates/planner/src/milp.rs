//! Problem definition and its mixed-integer formulation.
//!
//! Variables are laid out as edge flows, then one `λ` per (cell, breakpoint),
//! then one binary segment selector per (cell, segment). Coverage is not a
//! variable: each cell's row ties `Σ_j b_j λ_j` to `K` times its visit mass.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use snaremap_core::riskmap::PwlRiskModel;

use crate::error::{PlanError, Result};
use crate::graph::TimeUnrolledGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Absolute optimality gap for branch-and-bound.
    pub mip_gap: f64,
    pub feasibility: f64,
    /// Branch-and-bound stops here with its incumbent and a warning.
    pub node_limit: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { mip_gap: 1e-7, feasibility: 1e-9, node_limit: 20_000 }
    }
}

#[derive(Debug, Clone)]
pub struct PlanProblem {
    pub graph: TimeUnrolledGraph,
    pub pwl: Arc<PwlRiskModel>,
    pub k: usize,
    pub beta: f64,
    pub tolerances: Tolerances,
}

impl PlanProblem {
    pub fn new(graph: TimeUnrolledGraph, pwl: Arc<PwlRiskModel>, k: usize, beta: f64) -> Result<Self> {
        if k < 1 {
            return Err(PlanError::InvalidInput("K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(PlanError::InvalidInput(format!("beta {beta} outside [0, 1]")));
        }
        if pwl.num_cells() != graph.num_cells() {
            return Err(PlanError::InvalidInput("PWL model and graph cover different grids".into()));
        }
        if let Some(&v) = graph.cells().iter().find(|&&v| !pwl.has_cell(v)) {
            return Err(PlanError::InvalidInput(format!("PWL model has no values for cell {v}")));
        }
        Ok(Self { graph, pwl, k, beta, tolerances: Tolerances::default() })
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut p = Self::new(self.graph.clone(), Arc::clone(&self.pwl), self.k, beta)?;
        p.tolerances = self.tolerances;
        Ok(p)
    }

    /// Largest coverage any cell can receive.
    pub fn max_coverage(&self) -> f64 {
        (self.graph.horizon() * self.k) as f64
    }

    /// PWL breakpoints, extended by a flat piece to `T·K` when the model
    /// stops short of it (evaluation clamps there anyway).
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut bp = self.pwl.breakpoints().to_vec();
        if self.max_coverage() > self.pwl.c_max() {
            bp.push(self.max_coverage());
        }
        bp
    }

    /// Robust utility at [`Self::breakpoints`] for one cell.
    pub fn utility_values(&self, cell: usize, beta: f64) -> Vec<f64> {
        let mut u = self.pwl.utility_values(cell, beta).expect("graph cells are checked at construction");
        if self.max_coverage() > self.pwl.c_max() {
            u.push(*u.last().expect("nonempty"));
        }
        u
    }

    /// `Σ_v U_β,v(c_v)` over the cells the graph can reach.
    pub fn evaluate(&self, coverage: &[f64], beta: f64) -> f64 {
        self.graph
            .cells()
            .iter()
            .map(|&v| self.pwl.eval_utility(v, coverage[v], beta).expect("checked"))
            .sum()
    }

    /// Coverage `c_v = K · visits_v` for an edge flow.
    pub fn coverage(&self, flow: &[f64]) -> Vec<f64> {
        self.graph.visits(flow).into_iter().map(|x| x * self.k as f64).collect()
    }

    /// True when every reachable cell's utility has nondecreasing slopes.
    pub fn utilities_convex(&self) -> bool {
        let bp = self.breakpoints();
        self.graph.cells().iter().all(|&v| is_convex(&bp, &self.utility_values(v, self.beta)))
    }
}

pub fn is_convex(bp: &[f64], vals: &[f64]) -> bool {
    let slopes: Vec<f64> = (0..bp.len() - 1).map(|j| (vals[j + 1] - vals[j]) / (bp[j + 1] - bp[j])).collect();
    slopes.windows(2).all(|s| s[1] >= s[0] - 1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Eq,
    Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub coefs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// One cell's `λ` block: adjacent-pair (SOS2) structure over `breakpoints`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sos2Group {
    pub cell: usize,
    pub lambda: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpModel {
    pub names: Vec<String>,
    pub upper: Vec<f64>,
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub num_flow: usize,
    /// Variables `0..num_continuous` are flows and `λ`; the rest are binary.
    pub num_continuous: usize,
    pub breakpoints: Vec<f64>,
    pub groups: Vec<Sos2Group>,
}

/// Weight of the lexicographic tie-break on edge flows; small enough that the
/// total perturbation stays below `1e−9·T`.
pub fn tie_break(num_edges: usize, e: usize) -> f64 {
    -1e-9 * (e + 1) as f64 / (num_edges as f64 + 1.0)
}

pub fn assemble_milp(p: &PlanProblem) -> MilpModel {
    let g = &p.graph;
    if p.max_coverage() > p.pwl.c_max() {
        log::warn!(
            "coverage can reach {} but the PWL model stops at {}; utilities are held flat beyond it",
            p.max_coverage(),
            p.pwl.c_max()
        );
    }
    let bp = p.breakpoints();
    let nb = bp.len();
    let mut names = Vec::new();
    let mut upper = Vec::new();
    let mut objective = Vec::new();
    for (e, edge) in g.edges().iter().enumerate() {
        let (a, b) = (g.nodes()[edge.from], g.nodes()[edge.to]);
        names.push(format!("f_{}_{}_{}", a.t + 1, a.cell, b.cell));
        upper.push(1.0);
        objective.push(tie_break(g.edges().len(), e));
    }
    let num_flow = names.len();
    let mut groups = Vec::new();
    let k = p.k as f64;
    for &v in g.cells() {
        let values = p.utility_values(v, p.beta);
        let start = names.len();
        // A cell is visited at most once per graph node it owns; the post at
        // least at both ends. Breakpoints outside that coverage range stay at
        // zero, which tightens the relaxation's concave envelope.
        let slots = g.nodes().iter().filter(|n| n.cell == v).count();
        let least = if v == g.post() { g.horizon().min(2) } else { 0 };
        let lo = bp.partition_point(|&b| b <= k * least as f64).saturating_sub(1);
        let hi = bp.partition_point(|&b| b < k * slots as f64).min(nb - 1);
        for (j, &u) in values.iter().enumerate() {
            names.push(format!("lam_{v}_{j}"));
            upper.push(if (lo..=hi).contains(&j) { 1.0 } else { 0.0 });
            objective.push(u);
        }
        groups.push(Sos2Group { cell: v, lambda: (start..start + nb).collect(), values });
    }
    let num_continuous = names.len();
    let mut selectors = Vec::new();
    for &v in g.cells() {
        let start = names.len();
        for s in 0..nb - 1 {
            names.push(format!("z_{v}_{s}"));
            upper.push(1.0);
            objective.push(0.0);
        }
        selectors.push(start);
    }

    let mut rows = Vec::new();
    if g.horizon() > 1 {
        rows.push(Row {
            name: "source".into(),
            coefs: g.out_edges(g.source()).iter().map(|&e| (e, 1.0)).collect(),
            sense: Sense::Eq,
            rhs: 1.0,
        });
        for (id, n) in g.nodes().iter().enumerate() {
            if id == g.source() || id == g.sink() {
                continue;
            }
            let mut coefs: Vec<(usize, f64)> = g.in_edges(id).iter().map(|&e| (e, 1.0)).collect();
            coefs.extend(g.out_edges(id).iter().map(|&e| (e, -1.0)));
            rows.push(Row { name: format!("flow_{}_{}", n.t + 1, n.cell), coefs, sense: Sense::Eq, rhs: 0.0 });
        }
    }
    for grp in &groups {
        let v = grp.cell;
        let mut coefs: Vec<(usize, f64)> = grp.lambda.iter().zip(&bp).filter(|(_, &b)| b != 0.0).map(|(&l, &b)| (l, b)).collect();
        for (e, edge) in g.edges().iter().enumerate() {
            if g.nodes()[edge.from].cell == v {
                coefs.push((e, -k));
            }
        }
        let rhs = if v == g.post() { k } else { 0.0 };
        rows.push(Row { name: format!("cov_{v}"), coefs, sense: Sense::Eq, rhs });
        rows.push(Row {
            name: format!("conv_{v}"),
            coefs: grp.lambda.iter().map(|&l| (l, 1.0)).collect(),
            sense: Sense::Eq,
            rhs: 1.0,
        });
    }
    for (grp, &z0) in groups.iter().zip(&selectors) {
        let v = grp.cell;
        for (j, &l) in grp.lambda.iter().enumerate() {
            let mut coefs = vec![(l, 1.0)];
            if j > 0 {
                coefs.push((z0 + j - 1, -1.0));
            }
            if j + 1 < nb {
                coefs.push((z0 + j, -1.0));
            }
            rows.push(Row { name: format!("sos_{v}_{j}"), coefs, sense: Sense::Le, rhs: 0.0 });
        }
        rows.push(Row {
            name: format!("pick_{v}"),
            coefs: (0..nb - 1).map(|s| (z0 + s, 1.0)).collect(),
            sense: Sense::Eq,
            rhs: 1.0,
        });
    }
    MilpModel { names, upper, objective, rows, num_flow, num_continuous, breakpoints: bp, groups }
}

impl MilpModel {
    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    /// Rows that involve only continuous variables.
    pub fn continuous_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.coefs.iter().all(|&(j, _)| j < self.num_continuous))
    }

    /// Industry-standard LP text format.
    pub fn to_lp_string(&self) -> String {
        let mut s = String::from("\\ patrol plan MILP\nMaximize\n obj:");
        write_terms(&mut s, self.objective.iter().enumerate().filter(|(_, &c)| c != 0.0).map(|(j, &c)| (j, c)), &self.names);
        s.push_str("\nSubject To\n");
        for r in &self.rows {
            let _ = write!(s, " {}:", r.name);
            write_terms(&mut s, r.coefs.iter().copied(), &self.names);
            let op = match r.sense {
                Sense::Eq => "=",
                Sense::Le => "<=",
            };
            let _ = writeln!(s, " {op} {}", fmt_num(r.rhs));
        }
        s.push_str("Bounds\n");
        for (name, &u) in self.names.iter().zip(&self.upper).take(self.num_continuous) {
            let _ = writeln!(s, " 0 <= {name} <= {}", fmt_num(u));
        }
        if self.num_vars() > self.num_continuous {
            s.push_str("Binaries\n");
            for chunk in self.names[self.num_continuous..].chunks(8) {
                let _ = writeln!(s, " {}", chunk.join(" "));
            }
        }
        s.push_str("End\n");
        s
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x:e}")
}

fn write_terms(s: &mut String, terms: impl Iterator<Item = (usize, f64)>, names: &[String]) {
    let mut any = false;
    for (i, (j, c)) in terms.enumerate() {
        if i > 0 && i % 6 == 0 {
            s.push_str("\n   ");
        }
        let sign = if c < 0.0 { '-' } else { '+' };
        let _ = write!(s, " {sign} {} {}", fmt_num(c.abs()), names[j]);
        any = true;
    }
    if !any {
        // LP readers need at least one term; a zero multiple of the first variable.
        let _ = write!(s, " 0 {}", names[0]);
    }
}
