use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bnb::branch_and_bound;
use crate::enumerate::{best_path, DEFAULT_PATH_LIMIT};
use crate::error::{PlanError, Result};
use crate::external::ExternalSolver;
use crate::graph::TimeUnrolledGraph;
use crate::milp::{assemble_milp, PlanProblem};

/// Per time step, the model's flow tie-break lowers its objective by less than this.
const TIE_BREAK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    /// Enumeration when it is exact and small enough, else branch-and-bound.
    Auto,
    Enumerate,
    Bnb,
    Highs,
}

impl std::str::FromStr for SolverChoice {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "enumerate" => Ok(Self::Enumerate),
            "bnb" => Ok(Self::Bnb),
            "highs" => Ok(Self::Highs),
            _ => Err(PlanError::InvalidInput(format!("unknown solver {s:?} (auto, enumerate, bnb, highs)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// Cell at every time step, starting and ending at the post.
    pub cells: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatrolPlan {
    pub post: usize,
    pub horizon: usize,
    pub k: usize,
    pub beta: f64,
    /// Per edge of the time-unrolled graph.
    pub flow: Vec<f64>,
    /// Per grid cell; zero where the patrol cannot reach.
    pub coverage: Vec<f64>,
    pub routes: Vec<Route>,
    /// `Σ_v U_β,v(c_v)` over reachable cells.
    pub objective: f64,
    /// `Σ_v g_v(c_v)` over reachable cells.
    pub objective_nominal: f64,
    /// Proven upper bound on `objective`; above it only when a solver stopped early.
    pub bound: f64,
    pub solver: String,
}

impl PatrolPlan {
    fn from_flow(p: &PlanProblem, flow: Vec<f64>, bound: Option<f64>, solver: String) -> Self {
        let coverage = p.coverage(&flow);
        let routes = decompose_routes(&p.graph, &flow);
        let objective = p.evaluate(&coverage, p.beta);
        Self {
            post: p.graph.post(),
            horizon: p.graph.horizon(),
            k: p.k,
            beta: p.beta,
            objective,
            bound: bound.map_or(objective, |b| b.max(objective)),
            objective_nominal: p.evaluate(&coverage, 0.0),
            flow,
            coverage,
            routes,
            solver,
        }
    }

    pub fn to_json(&self, graph: &TimeUnrolledGraph) -> Result<String> {
        let coverage: Vec<_> = graph
            .cells()
            .iter()
            .map(|&v| json!({ "cell": v, "coverage": self.coverage[v] }))
            .collect();
        let v = json!({
            "post": self.post,
            "horizon": self.horizon,
            "k": self.k,
            "beta": self.beta,
            "solver": self.solver,
            "objective": self.objective,
            "objective_nominal": self.objective_nominal,
            "bound": self.bound,
            "coverage": coverage,
            "routes": self.routes,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn write_json(&self, graph: &TimeUnrolledGraph, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json(graph)? + "\n")?;
        Ok(())
    }
}

/// Largest violation of flow conservation, including the unit source outflow.
pub fn flow_residual(graph: &TimeUnrolledGraph, flow: &[f64]) -> f64 {
    if graph.horizon() == 1 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for id in 0..graph.nodes().len() {
        let inflow: f64 = graph.in_edges(id).iter().map(|&e| flow[e]).sum();
        let outflow: f64 = graph.out_edges(id).iter().map(|&e| flow[e]).sum();
        let r = if id == graph.source() {
            outflow - 1.0
        } else if id == graph.sink() {
            inflow - 1.0
        } else {
            inflow - outflow
        };
        worst = worst.max(r.abs());
    }
    worst
}

pub fn solve(p: &PlanProblem, choice: SolverChoice) -> Result<PatrolPlan> {
    let g = &p.graph;
    let choice = match choice {
        SolverChoice::Auto if p.utilities_convex() && g.count_paths() <= DEFAULT_PATH_LIMIT as f64 => {
            SolverChoice::Enumerate
        }
        SolverChoice::Auto => SolverChoice::Bnb,
        c => c,
    };
    match choice {
        SolverChoice::Enumerate => {
            if !p.utilities_convex() {
                log::warn!("utilities are not convex; enumeration only searches pure patrols");
            }
            let best = best_path(p, DEFAULT_PATH_LIMIT)?;
            let mut flow = vec![0.0; g.edges().len()];
            best.edges.iter().for_each(|&e| flow[e] = 1.0);
            Ok(PatrolPlan::from_flow(p, flow, None, format!("enumerate({} paths)", best.num_paths)))
        }
        SolverChoice::Bnb => {
            let model = assemble_milp(p);
            let sol = branch_and_bound(&model, p.tolerances.mip_gap, p.tolerances.node_limit)?;
            let stopped_early = sol.bound > sol.objective + p.tolerances.mip_gap;
            let flow = clean_flow(&sol.x[..model.num_flow]);
            check_flow(p, &flow)?;
            Ok(PatrolPlan::from_flow(p, flow, stopped_early.then_some(sol.bound + TIE_BREAK_SLACK * g.horizon() as f64), format!("bnb({} nodes)", sol.nodes)))
        }
        SolverChoice::Highs => {
            let ext = ExternalSolver::default();
            if !ext.available() {
                return Err(PlanError::AdapterUnavailable(format!("{} cannot import highspy", ext.python)));
            }
            let model = assemble_milp(p);
            let x = ext.solve(&model)?;
            let flow = clean_flow(&x[..model.num_flow]);
            check_flow(p, &flow)?;
            Ok(PatrolPlan::from_flow(p, flow, None, "highs".into()))
        }
        SolverChoice::Auto => unreachable!("resolved above"),
    }
}

/// Snaps solver noise at the bounds.
fn clean_flow(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            if v.abs() < 1e-12 {
                0.0
            } else if (v - 1.0).abs() < 1e-12 {
                1.0
            } else {
                v.clamp(0.0, 1.0)
            }
        })
        .collect()
}

fn check_flow(p: &PlanProblem, flow: &[f64]) -> Result<()> {
    let r = flow_residual(&p.graph, flow);
    if r > 1e3 * p.tolerances.feasibility {
        return Err(PlanError::Numerical(format!("solver flow violates conservation by {r:e}")));
    }
    Ok(())
}

/// Strips source-to-sink paths off the flow, following the heaviest edge at
/// each step (lowest id on ties). Weights are renormalised to sum to one.
pub fn decompose_routes(graph: &TimeUnrolledGraph, flow: &[f64]) -> Vec<Route> {
    const EPS: f64 = 1e-9;
    if graph.horizon() == 1 {
        return vec![Route { cells: vec![graph.post()], weight: 1.0 }];
    }
    let mut rem = flow.to_vec();
    let mut routes: Vec<Route> = Vec::new();
    while routes.len() < graph.edges().len() {
        let mut node = graph.source();
        let mut edges = Vec::new();
        while node != graph.sink() {
            let e = graph
                .out_edges(node)
                .iter()
                .copied()
                .fold(None, |best: Option<usize>, e| match best {
                    Some(b) if rem[b] >= rem[e] => Some(b),
                    _ => Some(e),
                })
                .expect("interior nodes have out-edges");
            edges.push(e);
            node = graph.edges()[e].to;
        }
        let w = edges.iter().map(|&e| rem[e]).fold(f64::INFINITY, f64::min);
        if w <= EPS {
            break;
        }
        edges.iter().for_each(|&e| rem[e] -= w);
        routes.push(Route { cells: graph.path_cells(&edges), weight: w });
    }
    let total: f64 = routes.iter().map(|r| r.weight).sum();
    if routes.is_empty() || total <= 0.0 {
        // Degenerate input; fall back to staying at the post.
        return vec![Route { cells: vec![graph.post(); graph.horizon()], weight: 1.0 }];
    }
    routes.iter_mut().for_each(|r| r.weight /= total);
    routes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub beta: f64,
    /// `U_β(C_β) / U_β(C_0)`; `None` when the baseline utility is not positive.
    pub ratio: Option<f64>,
    pub utility: f64,
    pub baseline_utility: f64,
}

/// True when `ν` takes a single value over every reachable cell and breakpoint.
fn nu_is_constant(p: &PlanProblem) -> bool {
    let mut vals = p.graph.cells().iter().flat_map(|&v| p.pwl.nu_values(v).expect("checked").iter().copied());
    match vals.next() {
        None => true,
        Some(first) => vals.all(|x| x == first),
    }
}

/// Plans for every `β` and compares each against the nominal plan.
pub fn improvement_ratio(p: &PlanProblem, betas: &[f64], choice: SolverChoice) -> Result<Vec<RatioRow>> {
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(PlanError::InvalidInput(format!("beta {b} outside [0, 1]")));
    }
    let base = solve(&p.with_beta(0.0)?, choice)?;
    // A constant ν scales every utility by (1 − βν), so the nominal plan stays optimal.
    let uniform = nu_is_constant(p);
    betas
        .par_iter()
        .map(|&beta| {
            let plan = if beta == 0.0 || uniform { base.clone() } else { solve(&p.with_beta(beta)?, choice)? };
            let utility = p.evaluate(&plan.coverage, beta);
            let baseline_utility = p.evaluate(&base.coverage, beta);
            let ratio = (baseline_utility > 0.0).then(|| utility / baseline_utility);
            Ok(RatioRow { beta, ratio, utility, baseline_utility })
        })
        .collect()
}
