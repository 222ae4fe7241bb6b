//! Robust patrol planning.
//!
//! A patrol is a unit flow on a time-unrolled park graph from the post back
//! to the post. Coverage `c_v` is `K` times the flow through cell `v`, and the
//! plan maximises `Σ_v U_v(c_v)` with `U = g − β·g·ν` piecewise linear in `c`.

pub mod bnb;
pub mod enumerate;
pub mod error;
pub mod external;
pub mod graph;
pub mod milp;
pub mod plan;
pub mod simplex;
pub mod synth;

pub use error::{PlanError, Result};
pub use graph::{build_graph, TimeUnrolledGraph};
pub use milp::{assemble_milp, MilpModel, PlanProblem, Tolerances};
pub use plan::{decompose_routes, flow_residual, improvement_ratio, solve, PatrolPlan, RatioRow, Route, SolverChoice};
