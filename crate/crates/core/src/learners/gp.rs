//! Binary GP classification with a logistic likelihood under the Laplace
//! approximation. Inputs are standardised per feature before the RBF kernel
//! `σ_f² exp(-|x-x'|²/(2ℓ²))` is applied.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainMatrix;
use crate::error::{Error, Result};

const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// `None` selects the median pairwise distance of the (standardised) inputs.
    pub lengthscale: Option<f64>,
    pub signal_variance: f64,
    pub jitter: f64,
    pub max_points: usize,
    pub standardize: bool,
    /// Maximise the approximate log marginal likelihood over `ℓ` and `σ_f²`.
    pub optimize: bool,
    pub max_newton_iters: usize,
    pub newton_tol: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            lengthscale: None,
            signal_variance: 1.0,
            jitter: 1e-6,
            max_points: 1000,
            standardize: true,
            optimize: false,
            max_newton_iters: 100,
            newton_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpClassifier {
    lengthscale: f64,
    signal_variance: f64,
    jitter: f64,
    shift: Vec<f64>,
    scale: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    /// `t - π(f̂)`; the posterior latent mean is `k*ᵀ dual`.
    dual: Vec<f64>,
    sqrt_w: Vec<f64>,
    /// Lower Cholesky factor of `I + W½KW½`, row-major.
    chol: Vec<f64>,
    latent_mode: Vec<f64>,
    log_marginal_likelihood: f64,
    newton_iterations: usize,
    /// Negative-to-positive sampling rate of the training subsample, when it
    /// differs from the full data's class mix.
    #[serde(default)]
    negative_rate: Option<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn sq_dist_matrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| sq_dist(&x[i], &x[j]))
}

fn kernel(d2: &DMatrix<f64>, ell: f64, sf2: f64) -> DMatrix<f64> {
    d2.map(|d| sf2 * (-d / (2.0 * ell * ell)).exp())
}

/// Median of pairwise Euclidean distances; 1.0 if that median is zero.
pub fn median_heuristic(x: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(x.len() * x.len().saturating_sub(1) / 2);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push(sq_dist(&x[i], &x[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Posterior mode and factorisation at fixed hyperparameters.
struct Laplace {
    k: DMatrix<f64>,
    f: DVector<f64>,
    a: DVector<f64>,
    pi: DVector<f64>,
    sw: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    lml: f64,
    jitter: f64,
    iterations: usize,
}

fn factor_b(k: &DMatrix<f64>, sw: &DVector<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut b = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    Cholesky::new(b)
}

fn laplace_once(
    k: DMatrix<f64>,
    t: &DVector<f64>,
    jitter: f64,
    max_iters: usize,
    tol: f64,
) -> Option<Laplace> {
    let n = k.nrows();
    let mut f = DVector::zeros(n);
    let mut iterations = 0;
    loop {
        let pi = f.map(sigmoid);
        let w = pi.map(|p| p * (1.0 - p));
        let sw = w.map(f64::sqrt);
        let chol = factor_b(&k, &sw)?;
        let b = w.component_mul(&f) + (t - &pi);
        let c = chol.l().solve_lower_triangular(&sw.component_mul(&(&k * &b)))?;
        let a = &b - sw.component_mul(&chol.l().tr_solve_lower_triangular(&c)?);
        let f_new = &k * &a;
        let step = (&f_new - &f).amax();
        f = f_new;
        iterations += 1;
        if step < tol || iterations >= max_iters {
            break;
        }
    }
    let pi = f.map(sigmoid);
    let sw = pi.map(|p| (p * (1.0 - p)).sqrt());
    let chol = factor_b(&k, &sw)?;
    let a = t - &pi;
    let loglik: f64 = f
        .iter()
        .zip(t.iter())
        .map(|(fi, ti)| log_sigmoid(if *ti > 0.5 { *fi } else { -fi }))
        .sum();
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * a.dot(&f) + loglik - log_det;
    Some(Laplace {
        k,
        f,
        a,
        pi,
        sw,
        chol,
        lml,
        jitter,
        iterations,
    })
}

fn laplace(
    d2: &DMatrix<f64>,
    t: &DVector<f64>,
    ell: f64,
    sf2: f64,
    jitter: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Laplace> {
    let mut jit = jitter.max(0.0);
    loop {
        let mut k = kernel(d2, ell, sf2);
        for i in 0..k.nrows() {
            k[(i, i)] += jit;
        }
        if let Some(state) = laplace_once(k, t, jit, max_iters, tol) {
            if state.lml.is_finite() {
                return Ok(state);
            }
        }
        if jit >= MAX_JITTER {
            return Err(Error::Cholesky(jit));
        }
        jit = if jit == 0.0 { 1e-10 } else { (jit * 10.0).min(MAX_JITTER) };
    }
}

/// Gradient of the Laplace log marginal likelihood with respect to
/// `(ℓ, σ_f²)`, including the implicit dependence through the mode.
fn lml_gradient(state: &Laplace, d2: &DMatrix<f64>, ell: f64, sf2: f64) -> (f64, f64) {
    let n = state.k.nrows();
    let l = state.chol.l();
    let sw_diag = DMatrix::from_diagonal(&state.sw);
    let inner = state.chol.solve(&sw_diag);
    let r = DMatrix::from_fn(n, n, |i, j| state.sw[i] * inner[(i, j)]);
    let swk = DMatrix::from_fn(n, n, |i, j| state.sw[i] * state.k[(i, j)]);
    let c = l
        .solve_lower_triangular(&swk)
        .expect("factor of a positive definite matrix");
    // Third derivative of the log likelihood; dW/df = -d3.
    let d3 = state.pi.map(|p| -p * (1.0 - p) * (1.0 - 2.0 * p));
    // d(-½ log|B|)/df̂ = ½ diag((K⁻¹+W)⁻¹) ∘ d3.
    let s2 = DVector::from_fn(n, |i, _| {
        let ctc = c.column(i).norm_squared();
        0.5 * (state.k[(i, i)] - ctc) * d3[i]
    });
    let grad_loglik = &state.a;
    let k_nf = kernel(d2, ell, sf2);
    let dk_dell = k_nf.zip_map(d2, |k, d| k * d / ell.powi(3));
    let dk_dsf2 = k_nf / sf2;
    let component = |dk: &DMatrix<f64>| {
        let s1 = 0.5 * (state.a.transpose() * dk * &state.a)[(0, 0)]
            - 0.5 * r.component_mul(dk).sum();
        let b = dk * grad_loglik;
        let s3 = &b - &state.k * (&r * &b);
        s1 + s2.dot(&s3)
    };
    (component(&dk_dell), component(&dk_dsf2))
}

/// Laplace log marginal likelihood and its gradient in `(ℓ, σ_f²)` for
/// inputs used as given.
pub fn log_marginal_likelihood(
    inputs: &[Vec<f64>],
    labels: &[bool],
    lengthscale: f64,
    signal_variance: f64,
    jitter: f64,
    newton_tol: f64,
) -> Result<(f64, [f64; 2])> {
    let d2 = sq_dist_matrix(inputs);
    let t = DVector::from_iterator(labels.len(), labels.iter().map(|&y| y as u8 as f64));
    let state = laplace(&d2, &t, lengthscale, signal_variance, jitter, 200, newton_tol)?;
    let (gl, gs) = lml_gradient(&state, &d2, lengthscale, signal_variance);
    Ok((state.lml, [gl, gs]))
}

fn stratified_subsample<R: Rng + ?Sized>(labels: &[bool], cap: usize, rng: &mut R) -> Vec<usize> {
    if labels.len() <= cap {
        return (0..labels.len()).collect();
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(rng);
    pos.truncate(cap);
    neg.shuffle(rng);
    neg.truncate(cap - pos.len());
    pos.extend(neg);
    pos.sort_unstable();
    pos
}

pub fn train_gp<R: Rng + ?Sized>(
    data: &TrainMatrix,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<GpClassifier> {
    let keep = stratified_subsample(&data.labels, cfg.max_points.max(2), rng);
    if keep.len() < 2 {
        return Err(Error::InvalidInput("GP training needs at least two rows".into()));
    }
    if !(cfg.signal_variance.is_finite() && cfg.signal_variance > 0.0) {
        return Err(Error::InvalidInput("signal variance must be positive".into()));
    }
    let d = data.num_features();
    let (mut shift, mut scale) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for j in 0..d {
            let col: Vec<f64> = keep.iter().map(|&i| data.rows[i][j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            shift[j] = m;
            scale[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
    }
    let inputs: Vec<Vec<f64>> = keep
        .iter()
        .map(|&i| {
            data.rows[i]
                .iter()
                .enumerate()
                .map(|(j, v)| (v - shift[j]) / scale[j])
                .collect()
        })
        .collect();
    let labels: Vec<bool> = keep.iter().map(|&i| data.labels[i]).collect();
    let mut ell = match cfg.lengthscale {
        Some(l) if l.is_finite() && l > 0.0 => l,
        Some(_) => return Err(Error::InvalidInput("lengthscale must be positive".into())),
        None => median_heuristic(&inputs),
    };
    let mut sf2 = cfg.signal_variance;
    let d2 = sq_dist_matrix(&inputs);
    let t = DVector::from_iterator(labels.len(), labels.iter().map(|&y| y as u8 as f64));
    let fit = |ell: f64, sf2: f64| {
        laplace(&d2, &t, ell, sf2, cfg.jitter, cfg.max_newton_iters, cfg.newton_tol)
    };
    let mut state = fit(ell, sf2)?;
    if cfg.optimize {
        // Gradient ascent in log-parameters with backtracking.
        let mut step = 0.5;
        for _ in 0..40 {
            let (gl, gs) = lml_gradient(&state, &d2, ell, sf2);
            let (ul, us) = (gl * ell, gs * sf2);
            let norm = (ul * ul + us * us).sqrt();
            if norm < 1e-6 {
                break;
            }
            let mut improved = false;
            while step > 1e-4 {
                let cand_ell = ell * (step * ul / norm).exp();
                let cand_sf2 = (sf2 * (step * us / norm).exp()).clamp(1e-3, 1e3);
                if let Ok(cand) = fit(cand_ell, cand_sf2) {
                    if cand.lml > state.lml {
                        ell = cand_ell;
                        sf2 = cand_sf2;
                        state = cand;
                        step *= 1.5;
                        improved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
    }
    let l = state.chol.l();
    let n = inputs.len();
    let chol = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| l[(i, j)])
        .collect();
    Ok(GpClassifier {
        lengthscale: ell,
        signal_variance: sf2,
        jitter: state.jitter,
        shift,
        scale,
        inputs,
        dual: state.a.iter().copied().collect(),
        sqrt_w: state.sw.iter().copied().collect(),
        chol,
        latent_mode: state.f.iter().copied().collect(),
        log_marginal_likelihood: state.lml,
        newton_iterations: state.iterations,
        negative_rate: super::sampling_rate(&data.labels, &keep),
    })
}

impl GpClassifier {
    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn num_points(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_features(&self) -> usize {
        self.shift.len()
    }

    pub fn latent_mode(&self) -> &[f64] {
        &self.latent_mode
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn newton_iterations(&self) -> usize {
        self.newton_iterations
    }

    pub fn negative_rate(&self) -> Option<f64> {
        self.negative_rate
    }

    pub(crate) fn set_negative_rate(&mut self, rate: Option<f64>) {
        self.negative_rate = rate;
    }

    /// Posterior latent mean and variance at `x` (original feature units).
    pub fn predict_latent(&self, x: &[f64]) -> Result<(f64, f64)> {
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
        let z: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.shift[j]) / self.scale[j])
            .collect();
        let n = self.inputs.len();
        let two_l2 = 2.0 * self.lengthscale * self.lengthscale;
        let ks: Vec<f64> = self
            .inputs
            .iter()
            .map(|xi| self.signal_variance * (-sq_dist(xi, &z) / two_l2).exp())
            .collect();
        let mean: f64 = ks.iter().zip(&self.dual).map(|(k, a)| k * a).sum();
        // Forward substitution for v = L \ (W½ k*).
        let mut v = vec![0.0; n];
        let mut vv = 0.0;
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i];
            let s: f64 = row.iter().zip(&v).map(|(l, vj)| l * vj).sum();
            v[i] = (self.sqrt_w[i] * ks[i] - s) / self.chol[i * n + i];
            vv += v[i] * v[i];
        }
        Ok((mean, (self.signal_variance - vv).max(0.0)))
    }

    /// Probit-approximated predictive probability and latent variance.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.predict_latent(x)?;
        let kappa = 1.0 / (1.0 + std::f64::consts::PI * v / 8.0).sqrt();
        let p = sigmoid(kappa * m).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        Ok((p, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn raw_cfg(ell: f64) -> GpConfig {
        GpConfig {
            lengthscale: Some(ell),
            standardize: false,
            ..GpConfig::default()
        }
    }

    #[test]
    fn symmetric_pair_gives_half() {
        let data = TrainMatrix::new(vec![vec![-1.0], vec![1.0]], vec![false, true]).unwrap();
        let gp = train_gp(&data, &raw_cfg(1.0), &mut rng()).unwrap();
        let (p, _) = gp.predict(&[0.0]).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        let (lo, _) = gp.predict(&[-1.0]).unwrap();
        let (hi, _) = gp.predict(&[1.0]).unwrap();
        assert!(lo < 0.5 && hi > 0.5);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let data =
            TrainMatrix::new(vec![vec![0.0], vec![0.5], vec![1.0]], vec![true, false, true])
                .unwrap();
        let cfg = GpConfig {
            signal_variance: 2.5,
            ..raw_cfg(0.5)
        };
        let gp = train_gp(&data, &cfg, &mut rng()).unwrap();
        let (m, v) = gp.predict_latent(&[1e3]).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(v, 2.5);
        assert_eq!(gp.predict(&[1e3]).unwrap().0, 0.5);
    }

    #[test]
    fn probabilities_strictly_inside_unit_interval() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let labels: Vec<bool> = (0..12).map(|i| i >= 6).collect();
        let data = TrainMatrix::new(rows, labels).unwrap();
        let cfg = GpConfig {
            signal_variance: 50.0,
            ..raw_cfg(2.0)
        };
        let gp = train_gp(&data, &cfg, &mut rng()).unwrap();
        for x in [-100.0, -3.0, 0.0, 5.5, 11.0, 1e6] {
            let (p, v) = gp.predict(&[x]).unwrap();
            assert!(p > 0.0 && p < 1.0, "{p}");
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x: Vec<Vec<f64>> = (0..9)
            .map(|i| vec![(i as f64 * 0.37).sin() * 2.0, i as f64 * 0.3])
            .collect();
        let y: Vec<bool> = (0..9).map(|i| (i * 7) % 3 == 0).collect();
        let (ell, sf2) = (0.8, 1.7);
        let (_, g) = log_marginal_likelihood(&x, &y, ell, sf2, 1e-8, 1e-12).unwrap();
        let h = 1e-5;
        let f = |l: f64, s: f64| log_marginal_likelihood(&x, &y, l, s, 1e-8, 1e-12).unwrap().0;
        let fd_l = (f(ell + h, sf2) - f(ell - h, sf2)) / (2.0 * h);
        let fd_s = (f(ell, sf2 + h) - f(ell, sf2 - h)) / (2.0 * h);
        assert!(((g[0] - fd_l) / fd_l).abs() < 1e-4, "{} vs {}", g[0], fd_l);
        assert!(((g[1] - fd_s) / fd_s).abs() < 1e-4, "{} vs {}", g[1], fd_s);
    }

    #[test]
    fn optimisation_does_not_lower_evidence() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 4.0]).collect();
        let labels: Vec<bool> = (0..20).map(|i| (i / 5) % 2 == 1).collect();
        let data = TrainMatrix::new(rows, labels).unwrap();
        let plain = train_gp(&data, &GpConfig::default(), &mut rng()).unwrap();
        let tuned = train_gp(
            &data,
            &GpConfig {
                optimize: true,
                ..GpConfig::default()
            },
            &mut rng(),
        )
        .unwrap();
        assert!(tuned.log_marginal_likelihood() >= plain.log_marginal_likelihood());
    }

    #[test]
    fn subsample_keeps_positives() {
        let labels: Vec<bool> = (0..50).map(|i| i % 10 == 0).collect();
        let keep = stratified_subsample(&labels, 12, &mut rng());
        assert_eq!(keep.len(), 12);
        assert_eq!(keep.iter().filter(|&&i| labels[i]).count(), 5);
    }

    #[test]
    fn needs_two_points() {
        let data = TrainMatrix::new(vec![vec![0.0]], vec![true]).unwrap();
        assert!(train_gp(&data, &GpConfig::default(), &mut rng()).is_err());
    }
}
