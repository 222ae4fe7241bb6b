//! Random small planning instances for solver cross-checks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snaremap_core::griddata::ParkGrid;
use snaremap_core::riskmap::{uniform_breakpoints, PwlRiskModel};

use crate::error::Result;
use crate::graph::build_graph;
use crate::milp::PlanProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityShape {
    /// Convex increasing `g`, one `ν` per cell: every `U_β` stays convex.
    Convex,
    /// Arbitrary increasing `g` and per-breakpoint `ν`.
    General,
}

/// A park of at most `max_side × max_side` cells with horizon `≤ max_t`.
pub fn random_problem(seed: u64, max_side: usize, max_t: usize, shape: UtilityShape) -> Result<PlanProblem> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (r.gen_range(1..=max_side), r.gen_range(1..=max_side));
    let n = w * h;
    let post = r.gen_range(0..n);
    let mask: Vec<bool> = (0..n).map(|v| v == post || r.gen_bool(0.85)).collect();
    let grid = ParkGrid::new(w, h, 1.0, vec![vec![0.0]; n], vec!["f".into()], vec![post], mask.clone())?;
    let horizon = r.gen_range(1..=max_t);
    let k = r.gen_range(1..=3);
    let m = r.gen_range(2..=8);
    // Convex instances must not be flattened past c_max.
    let stretch = match shape {
        UtilityShape::Convex => r.gen_range(1.0..1.3),
        UtilityShape::General => r.gen_range(0.6..1.2),
    };
    let c_max = (horizon * k) as f64 * stretch;
    let bp = uniform_breakpoints(m, c_max)?;
    let mut g = Vec::with_capacity(n);
    let mut nu = Vec::with_capacity(n);
    for &inside in &mask {
        if !inside {
            g.push(None);
            nu.push(None);
            continue;
        }
        let mut inc: Vec<f64> = (0..m).map(|_| r.gen::<f64>()).collect();
        if shape == UtilityShape::Convex {
            inc.sort_by(f64::total_cmp);
        }
        let base = r.gen_range(0.0..0.2);
        let top = r.gen_range(base..1.0);
        let total: f64 = inc.iter().sum::<f64>().max(1e-12);
        let mut vals = vec![base];
        for d in &inc {
            let next = vals.last().unwrap() + (top - base) * d / total;
            vals.push(next.min(1.0));
        }
        g.push(Some(vals));
        nu.push(Some(match shape {
            UtilityShape::Convex => vec![r.gen::<f64>(); m + 1],
            UtilityShape::General => (0..=m).map(|_| r.gen::<f64>()).collect(),
        }));
    }
    let pwl = Arc::new(PwlRiskModel::new(bp, g, nu)?);
    let beta = [0.0, 0.25, 0.5, 0.75, 1.0][r.gen_range(0..5)];
    PlanProblem::new(build_graph(&grid, post, horizon)?, pwl, k, beta)
}
