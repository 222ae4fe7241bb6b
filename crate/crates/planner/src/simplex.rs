//! Dense two-phase primal simplex for `max cᵀx  s.t.  A x = b, 0 ≤ x ≤ u`.
//!
//! Nonbasic variables rest at either bound. The tableau carries the
//! artificial columns throughout, so they always hold `B⁻¹`; basic values are
//! recomputed from it at the end instead of trusting accumulated updates.

use crate::error::{PlanError, Result};

const COST_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;
const DEGENERATE_SWITCH: usize = 50;

#[derive(Debug, Clone)]
pub struct Lp {
    pub num_vars: usize,
    /// Row-major, `rows × num_vars`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// `f64::INFINITY` for no upper bound.
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    Lower,
    Upper,
}

impl Lp {
    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    fn check(&self) -> Result<()> {
        let (m, n) = (self.num_rows(), self.num_vars);
        if self.a.len() != m * n || self.c.len() != n || self.upper.len() != n {
            return Err(PlanError::InvalidInput("LP dimensions disagree".into()));
        }
        if self.upper.iter().any(|&u| !(u >= 0.0)) {
            return Err(PlanError::InvalidInput("LP upper bounds must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Tableau {
    m: usize,
    /// Structural columns followed by one artificial per row.
    width: usize,
    n: usize,
    tab: Vec<f64>,
    rhs: Vec<f64>,
    xb: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    upper: Vec<f64>,
    /// Original columns after row sign normalisation.
    cols: Vec<f64>,
    /// Phase-two costs, artificials included at zero.
    cost: Vec<f64>,
}

impl Tableau {
    fn new(lp: &Lp) -> Self {
        let (m, n) = (lp.num_rows(), lp.num_vars);
        let width = n + m;
        let mut tab = vec![0.0; m * width];
        let mut rhs = lp.b.clone();
        for i in 0..m {
            let sign = if lp.b[i] < 0.0 { -1.0 } else { 1.0 };
            rhs[i] *= sign;
            for j in 0..n {
                tab[i * width + j] = sign * lp.a[i * n + j];
            }
            tab[i * width + n + i] = 1.0;
        }
        let cols = tab.clone();
        let mut upper = lp.upper.clone();
        upper.extend(std::iter::repeat(f64::INFINITY).take(m));
        let mut status = vec![Status::Lower; width];
        for s in &mut status[n..] {
            *s = Status::Basic;
        }
        Self {
            m,
            width,
            n,
            tab,
            xb: rhs.clone(),
            rhs,
            basis: (n..n + m).collect(),
            status,
            upper,
            cols,
            cost: Vec::new(),
        }
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.tab[i * self.width..(i + 1) * self.width];
                d.iter_mut().zip(row).for_each(|(dj, &a)| *dj -= cb * a);
            }
        }
        d
    }

    fn pivot(&mut self, r: usize, q: usize, d: &mut [f64]) {
        let w = self.width;
        let p = self.tab[r * w + q];
        let (before, rest) = self.tab.split_at_mut(r * w);
        let (row, after) = rest.split_at_mut(w);
        row.iter_mut().for_each(|v| *v /= p);
        let update = |other: &mut [f64]| {
            let f = other[q];
            if f != 0.0 {
                other.iter_mut().zip(row.iter()).for_each(|(o, &a)| *o -= f * a);
                other[q] = 0.0;
            }
        };
        before.chunks_mut(w).for_each(update);
        after.chunks_mut(w).for_each(update);
        let f = d[q];
        if f != 0.0 {
            d.iter_mut().zip(row.iter()).for_each(|(o, &a)| *o -= f * a);
            d[q] = 0.0;
        }
        row[q] = 1.0;
        self.basis[r] = q;
    }

    fn nonbasic_value(&self, j: usize) -> f64 {
        match self.status[j] {
            Status::Upper => self.upper[j],
            _ => 0.0,
        }
    }

    /// `x_B = B⁻¹ (b − Σ_{j at upper} A_j u_j)` using the artificial block as `B⁻¹`.
    fn recompute_basic_values(&mut self) {
        let mut rhs = self.rhs.clone();
        for j in 0..self.width {
            if self.status[j] == Status::Upper {
                let u = self.upper[j];
                for (i, r) in rhs.iter_mut().enumerate() {
                    *r -= self.cols[i * self.width + j] * u;
                }
            }
        }
        for i in 0..self.m {
            let row = &self.tab[i * self.width + self.n..(i + 1) * self.width];
            self.xb[i] = row.iter().zip(&rhs).map(|(a, r)| a * r).sum();
        }
    }

    /// Runs primal simplex iterations for the given costs. Returns false if unbounded.
    fn optimise(&mut self, cost: &[f64], max_iters: usize) -> Result<bool> {
        let mut d = self.reduced_costs(cost);
        let mut degenerate = 0usize;
        for iter in 0..max_iters {
            if iter > 0 && iter % 200 == 0 {
                self.recompute_basic_values();
            }
            let bland = degenerate >= DEGENERATE_SWITCH;
            let mut q = usize::MAX;
            let mut best = COST_TOL;
            for j in 0..self.width {
                if self.upper[j] == 0.0 && self.status[j] != Status::Basic {
                    continue;
                }
                let score = match self.status[j] {
                    Status::Basic => continue,
                    Status::Lower => d[j],
                    Status::Upper => -d[j],
                };
                if score > best {
                    q = j;
                    best = score;
                    if bland {
                        break;
                    }
                }
            }
            if q == usize::MAX {
                return Ok(true);
            }
            let sigma = if self.status[q] == Status::Lower { 1.0 } else { -1.0 };
            let mut step = self.upper[q];
            let mut leave: Option<(usize, Status)> = None;
            let mut leave_mag = 0.0;
            for i in 0..self.m {
                let a = sigma * self.tab[i * self.width + q];
                let bi = self.basis[i];
                let (lim, to) = if a > PIVOT_TOL {
                    (self.xb[i].max(0.0) / a, Status::Lower)
                } else if a < -PIVOT_TOL && self.upper[bi].is_finite() {
                    ((self.upper[bi] - self.xb[i]).max(0.0) / -a, Status::Upper)
                } else {
                    continue;
                };
                // Ties prefer the larger pivot (or lower index under Bland);
                // a tie with the bound flip keeps the flip.
                let better = if lim < step - 1e-12 {
                    true
                } else if lim <= step + 1e-12 {
                    match leave {
                        Some((r, _)) if bland => bi < self.basis[r],
                        Some(_) => a.abs() > leave_mag,
                        None => false,
                    }
                } else {
                    false
                };
                if better {
                    step = lim.min(step);
                    leave = Some((i, to));
                    leave_mag = a.abs();
                }
            }
            if !step.is_finite() {
                return Ok(false);
            }
            degenerate = if step <= 1e-12 { degenerate + 1 } else { 0 };
            for i in 0..self.m {
                self.xb[i] -= sigma * self.tab[i * self.width + q] * step;
            }
            match leave {
                None => {
                    self.status[q] = if sigma > 0.0 { Status::Upper } else { Status::Lower };
                }
                Some((r, to)) => {
                    let entering = self.nonbasic_value(q) + sigma * step;
                    let out = self.basis[r];
                    self.status[out] = to;
                    self.status[q] = Status::Basic;
                    self.pivot(r, q, &mut d);
                    self.xb[r] = entering;
                }
            }
        }
        Err(PlanError::Numerical(format!("simplex exceeded {max_iters} iterations")))
    }

    fn values(&self) -> Vec<f64> {
        let mut x: Vec<f64> = (0..self.width).map(|j| self.nonbasic_value(j)).collect();
        for (i, &bi) in self.basis.iter().enumerate() {
            x[bi] = self.xb[i];
        }
        x
    }
}

/// Optimal tableau kept for re-solving after bounds are tightened.
#[derive(Clone)]
pub struct WarmStart(Tableau);

impl std::fmt::Debug for WarmStart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "WarmStart({}x{})", self.0.m, self.0.width)
    }
}

impl WarmStart {
    /// Approximate heap footprint.
    pub fn bytes(&self) -> usize {
        8 * (self.0.tab.len() + self.0.cols.len())
    }

    /// Lowers the given upper bounds and re-optimises with the dual simplex,
    /// starting from the stored optimal basis.
    pub fn resolve(&self, tighten: &[(usize, f64)]) -> Result<(LpOutcome, Option<WarmStart>)> {
        let mut t = self.0.clone();
        for &(j, u) in tighten {
            if u >= t.upper[j] {
                continue;
            }
            if t.status[j] == Status::Upper {
                let delta = t.upper[j] - u;
                for i in 0..t.m {
                    t.xb[i] += t.tab[i * t.width + j] * delta;
                }
                if u == 0.0 {
                    t.status[j] = Status::Lower;
                }
            }
            t.upper[j] = u;
        }
        let max_iters = 50 * t.width + 1000;
        if !t.dual_simplex(max_iters)? {
            return Ok((LpOutcome::Infeasible, None));
        }
        let cost = t.cost.clone();
        if !t.optimise(&cost, max_iters)? {
            return Ok((LpOutcome::Unbounded, None));
        }
        Ok(t.finish())
    }
}

impl Tableau {
    /// Bounded dual simplex from a dual-feasible basis. Returns false if the
    /// primal is infeasible.
    fn dual_simplex(&mut self, max_iters: usize) -> Result<bool> {
        let cost = self.cost.clone();
        let mut d = self.reduced_costs(&cost);
        for iter in 0..max_iters {
            if iter > 0 && iter % 200 == 0 {
                self.recompute_basic_values();
            }
            let mut r = usize::MAX;
            let mut worst = FEAS_TOL;
            for i in 0..self.m {
                let (v, u) = (self.xb[i], self.upper[self.basis[i]]);
                let viol = if v < 0.0 { -v } else { v - u };
                if viol > worst {
                    worst = viol;
                    r = i;
                }
            }
            if r == usize::MAX {
                return Ok(true);
            }
            let below = self.xb[r] < 0.0;
            let target = if below { 0.0 } else { self.upper[self.basis[r]] };
            let mut q = usize::MAX;
            let mut best = f64::INFINITY;
            let mut best_mag = 0.0;
            for j in 0..self.width {
                let st = self.status[j];
                if st == Status::Basic || (self.upper[j] == 0.0 && st == Status::Lower) {
                    continue;
                }
                let a = self.tab[r * self.width + j];
                // Moving x_j in its feasible direction must push row r toward `target`.
                let ok = match (st, below) {
                    (Status::Lower, true) => a < -PIVOT_TOL,
                    (Status::Upper, true) => a > PIVOT_TOL,
                    (Status::Lower, false) => a > PIVOT_TOL,
                    (Status::Upper, false) => a < -PIVOT_TOL,
                    (Status::Basic, _) => false,
                };
                if !ok {
                    continue;
                }
                let ratio = d[j].abs() / a.abs();
                if ratio < best - 1e-12 || (ratio <= best + 1e-12 && a.abs() > best_mag) {
                    best = ratio;
                    best_mag = a.abs();
                    q = j;
                }
            }
            if q == usize::MAX {
                return Ok(false);
            }
            let a_rq = self.tab[r * self.width + q];
            let delta = (self.xb[r] - target) / a_rq;
            for i in 0..self.m {
                self.xb[i] -= self.tab[i * self.width + q] * delta;
            }
            let entering = self.nonbasic_value(q) + delta;
            let out = self.basis[r];
            self.status[out] = if below { Status::Lower } else { Status::Upper };
            self.status[q] = Status::Basic;
            self.pivot(r, q, &mut d);
            self.xb[r] = entering;
        }
        Err(PlanError::Numerical(format!("dual simplex exceeded {max_iters} iterations")))
    }

    fn finish(mut self) -> (LpOutcome, Option<WarmStart>) {
        self.recompute_basic_values();
        let mut x = self.values();
        x.truncate(self.n);
        for (v, &u) in x.iter_mut().zip(&self.upper) {
            *v = v.clamp(0.0, u);
        }
        let objective = x.iter().zip(&self.cost).map(|(a, b)| a * b).sum();
        (LpOutcome::Optimal { x, objective }, Some(WarmStart(self)))
    }
}

pub fn solve_lp(lp: &Lp) -> Result<LpOutcome> {
    Ok(solve_lp_warm(lp)?.0)
}

/// As [`solve_lp`], also returning the optimal tableau for warm re-solves.
pub fn solve_lp_warm(lp: &Lp) -> Result<(LpOutcome, Option<WarmStart>)> {
    lp.check()?;
    let (m, n) = (lp.num_rows(), lp.num_vars);
    let max_iters = 50 * (m + n) + 1000;
    let mut t = Tableau::new(lp);
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|c| *c = -1.0);
    t.optimise(&phase1, max_iters)?;
    t.recompute_basic_values();
    let infeas: f64 = t.basis.iter().zip(&t.xb).filter(|(&b, _)| b >= n).map(|(_, &v)| v.abs()).sum();
    let scale = 1.0 + t.rhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if infeas > FEAS_TOL * scale {
        return Ok((LpOutcome::Infeasible, None));
    }
    // Artificials are pinned at zero; pivot basic ones out where possible.
    for j in n..n + m {
        t.upper[j] = 0.0;
        if t.status[j] != Status::Basic {
            t.status[j] = Status::Lower;
        }
    }
    let mut dummy = vec![0.0; n + m];
    for r in 0..m {
        if t.basis[r] < n {
            continue;
        }
        let w = t.width;
        let q = (0..n)
            .filter(|&j| t.status[j] != Status::Basic && t.tab[r * w + j].abs() > 1e-7)
            .max_by(|&a, &b| t.tab[r * w + a].abs().total_cmp(&t.tab[r * w + b].abs()));
        if let Some(q) = q {
            let value = t.nonbasic_value(q);
            let out = t.basis[r];
            t.status[out] = Status::Lower;
            t.status[q] = Status::Basic;
            t.pivot(r, q, &mut dummy);
            t.xb[r] = value;
        }
    }
    t.recompute_basic_values();
    let mut cost = lp.c.clone();
    cost.extend(std::iter::repeat(0.0).take(m));
    t.cost = cost.clone();
    if !t.optimise(&cost, max_iters)? {
        return Ok((LpOutcome::Unbounded, None));
    }
    Ok(t.finish())
}
