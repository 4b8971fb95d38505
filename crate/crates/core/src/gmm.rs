//! Diagonal-covariance Gaussian mixtures.
//!
//! Densities are evaluated in log space throughout. [`fit_em`] runs
//! expectation-maximization from a k-means++ seeding with an additive
//! variance floor `reg = reg_scale * max_j std(X[:, j])`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GmmError {
    #[error("need more samples than components ({samples} samples, {components} components)")]
    TooFewSamples { samples: usize, components: usize },
    #[error("all samples are identical")]
    DegenerateData,
    #[error("dimension mismatch: model has {expected}, input has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("invalid mixture parameters: {0}")]
    InvalidParams(&'static str),
}

/// `sum_k w_k N(x | mu_k, diag(var_k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
    reg: f64,
    // ln w_k - 0.5 * sum_j ln(2 pi var_kj)
    log_coef: Vec<f64>,
    inv_var: Matrix,
}

impl DiagGmm {
    /// Validates and builds a mixture. `reg` is the variance floor the
    /// parameters were fitted with (0 for hand-built models).
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix, reg: f64) -> Result<Self, GmmError> {
        let k = weights.len();
        if k == 0 || means.rows() != k || variances.rows() != k || means.cols() != variances.cols() {
            return Err(GmmError::InvalidParams("shapes"));
        }
        if means.cols() == 0 {
            return Err(GmmError::InvalidParams("zero dimension"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GmmError::InvalidParams("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidParams("weights must sum to 1"));
        }
        if !means.is_finite() {
            return Err(GmmError::InvalidParams("non-finite mean"));
        }
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(GmmError::InvalidParams("reg must be finite and non-negative"));
        }
        if variances.as_slice().iter().any(|v| !v.is_finite() || *v <= 0.0 || *v < reg) {
            return Err(GmmError::InvalidParams("variances must be positive, finite and >= reg"));
        }
        let log_coef = (0..k)
            .map(|c| {
                let half_log_det: f64 =
                    variances.row(c).iter().map(|&v| libm::log(2.0 * PI * v)).sum::<f64>() * 0.5;
                libm::log(weights[c]) - half_log_det
            })
            .collect();
        let inv_var = Matrix::from_fn(k, means.cols(), |i, j| 1.0 / variances[(i, j)]);
        Ok(Self { weights, means, variances, reg, log_coef, inv_var })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &Matrix {
        &self.variances
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    fn check_dim(&self, found: usize) -> Result<(), GmmError> {
        if found != self.dim() {
            return Err(GmmError::DimMismatch { expected: self.dim(), found });
        }
        Ok(())
    }

    /// `ln(w_k N(x | mu_k, var_k))` for every component, written into `out`.
    /// Returns their log-sum-exp, i.e. `ln p(x)`.
    #[inline]
    pub(crate) fn joint_log_densities(&self, x: &[f64], out: &mut [f64]) -> f64 {
        for (c, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(c);
            let iv = self.inv_var.row(c);
            let mut q = 0.0;
            for j in 0..x.len() {
                let diff = x[j] - mu[j];
                q += diff * diff * iv[j];
            }
            *o = self.log_coef[c] - 0.5 * q;
        }
        log_sum_exp(out)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, GmmError> {
        self.check_dim(x.len())?;
        let mut buf = vec![0.0; self.components()];
        Ok(self.joint_log_densities(x, &mut buf))
    }

    /// Responsibilities `gamma_k(x_t)` as a `T x K` matrix.
    pub fn posteriors(&self, x: &Matrix) -> Result<Matrix, GmmError> {
        self.check_dim(x.cols())?;
        let mut out = Matrix::zeros(x.rows(), self.components());
        for_each_row(x, &mut out, |xr, g| {
            let lse = self.joint_log_densities(xr, g);
            normalize_log_row(g, lse);
        });
        Ok(out)
    }

    /// Mean log-likelihood `(1/T) sum_t ln p(x_t)`.
    pub fn mean_log_likelihood(&self, x: &Matrix) -> Result<f64, GmmError> {
        self.check_dim(x.cols())?;
        if x.rows() == 0 {
            return Ok(0.0);
        }
        let mut buf = vec![0.0; self.components()];
        let total: f64 = x.row_iter().map(|r| self.joint_log_densities(r, &mut buf)).sum();
        Ok(total / x.rows() as f64)
    }

    /// Draws `n` samples from the mixture using the supplied generator.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Matrix {
        let picker = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let c = picker.sample(rng);
            let (mu, var) = (self.means.row(c), self.variances.row(c));
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *o = mu[j] + libm::sqrt(var[j]) * z;
            }
        }
        out
    }

    pub fn sample(&self, n: usize, seed: u64) -> Matrix {
        self.sample_with(&mut rng::seeded(seed), n)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(v.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

#[inline]
fn normalize_log_row(row: &mut [f64], lse: f64) {
    for g in row.iter_mut() {
        *g = libm::exp(*g - lse);
    }
}

/// Applies `f(x_row, out_row)` to every row pair; parallel when enabled.
/// Rows are independent so the result does not depend on scheduling.
fn for_each_row<F>(x: &Matrix, out: &mut Matrix, f: F)
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let k = out.cols();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let d = x.cols();
        out.as_mut_slice()
            .par_chunks_mut(k.max(1))
            .zip(x.as_slice().par_chunks(d.max(1)))
            .for_each(|(o, xr)| f(xr, o));
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = k;
        for i in 0..x.rows() {
            f(x.row(i), out.row_mut(i));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub reg_scale: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iters: 100, rel_tol: 1e-6, seed: 0, reg_scale: 1e-4 }
    }
}

pub const DEFAULT_COMPONENTS: usize = 16;

/// Components whose responsibility mass drops below this fraction of `T`
/// are re-seeded.
const DEAD_MASS_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: DiagGmm,
    /// Mean log-likelihood of each parameter set visited, starting with the
    /// initialization. The last entry belongs to the returned model.
    pub loglik_trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// How many component re-seeds happened.
    pub reseeds: usize,
}

/// Fits a `k`-component diagonal mixture to the rows of `x`.
pub fn fit_em(x: &Matrix, k: usize, opts: &EmOptions) -> Result<EmFit, GmmError> {
    let (t, d) = (x.rows(), x.cols());
    if k == 0 || t <= k {
        return Err(GmmError::TooFewSamples { samples: t, components: k });
    }
    if d == 0 {
        return Err(GmmError::InvalidParams("zero dimension"));
    }
    if !x.is_finite() {
        return Err(GmmError::NonFinite);
    }
    let first = x.row(0);
    if x.row_iter().all(|r| r == first) {
        return Err(GmmError::DegenerateData);
    }

    let (_, global_var) = column_mean_var(x);
    let max_std = global_var.iter().copied().fold(0.0, f64::max);
    let reg = opts.reg_scale * libm::sqrt(max_std);

    let mut rng = rng::seeded(opts.seed);
    let means = kmeans_plus_plus(x, k, &mut rng);
    let variances = Matrix::from_fn(k, d, |_, j| global_var[j] + reg);
    let mut gmm = DiagGmm::new(vec![1.0 / k as f64; k], means, variances, reg)?;

    let mut resp = Matrix::zeros(t, k);
    let mut log_px = vec![0.0; t];
    let mut trace = Vec::with_capacity(opts.max_iters + 1);
    let mut iterations = 0;
    let mut converged = false;
    let mut reseeds = 0;
    loop {
        let ll = e_step(&gmm, x, &mut resp, &mut log_px);
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (ll - prev) <= opts.rel_tol * prev.abs() {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations == opts.max_iters {
            break;
        }
        let (next, n_reseeded) = m_step(x, &resp, &log_px, &global_var, reg)?;
        gmm = next;
        reseeds += n_reseeded;
        iterations += 1;
    }
    Ok(EmFit { gmm, loglik_trace: trace, iterations, converged, reseeds })
}

/// Fills responsibilities and per-sample log densities; returns the mean
/// log-likelihood.
fn e_step(gmm: &DiagGmm, x: &Matrix, resp: &mut Matrix, log_px: &mut [f64]) -> f64 {
    let k = gmm.components();
    // Stash ln p(x_t) in the extra buffer, row by row, after normalizing.
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let d = x.cols();
        resp.as_mut_slice()
            .par_chunks_mut(k)
            .zip(x.as_slice().par_chunks(d))
            .zip(log_px.par_iter_mut())
            .for_each(|((g, xr), lp)| {
                let lse = gmm.joint_log_densities(xr, g);
                normalize_log_row(g, lse);
                *lp = lse;
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = k;
        for (i, lp) in log_px.iter_mut().enumerate() {
            let g = resp.row_mut(i);
            let lse = gmm.joint_log_densities(x.row(i), g);
            normalize_log_row(g, lse);
            *lp = lse;
        }
    }
    log_px.iter().sum::<f64>() / x.rows() as f64
}

fn m_step(
    x: &Matrix,
    resp: &Matrix,
    log_px: &[f64],
    global_var: &[f64],
    reg: f64,
) -> Result<(DiagGmm, usize), GmmError> {
    let (t, d, k) = (x.rows(), x.cols(), resp.cols());
    let mut mass = vec![0.0; k];
    let mut means = Matrix::zeros(k, d);
    for i in 0..t {
        let (xr, g) = (x.row(i), resp.row(i));
        for c in 0..k {
            mass[c] += g[c];
            let m = means.row_mut(c);
            for j in 0..d {
                m[j] += g[c] * xr[j];
            }
        }
    }
    let dead: Vec<bool> = mass.iter().map(|&m| m < DEAD_MASS_FRACTION * t as f64).collect();
    for c in 0..k {
        if !dead[c] {
            let inv = 1.0 / mass[c];
            means.row_mut(c).iter_mut().for_each(|m| *m *= inv);
        }
    }
    let mut variances = Matrix::zeros(k, d);
    for i in 0..t {
        let (xr, g) = (x.row(i), resp.row(i));
        for c in 0..k {
            if dead[c] {
                continue;
            }
            let (mu, v) = (means.row(c).to_vec(), variances.row_mut(c));
            for j in 0..d {
                let diff = xr[j] - mu[j];
                v[j] += g[c] * diff * diff;
            }
        }
    }
    for c in 0..k {
        if !dead[c] {
            let inv = 1.0 / mass[c];
            variances.row_mut(c).iter_mut().for_each(|v| *v = *v * inv + reg);
        }
    }

    // Dead components restart at the worst-explained samples with one
    // sample's worth of mass and the global variance.
    let n_dead = dead.iter().filter(|&&b| b).count();
    if n_dead > 0 {
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| log_px[a].partial_cmp(&log_px[b]).unwrap_or(core::cmp::Ordering::Equal));
        let mut worst = order.into_iter();
        for c in (0..k).filter(|&c| dead[c]) {
            let s = worst.next().expect("t > k");
            means.row_mut(c).copy_from_slice(x.row(s));
            for (v, g) in variances.row_mut(c).iter_mut().zip(global_var) {
                *v = g + reg;
            }
            mass[c] = 1.0;
        }
    }

    let total: f64 = mass.iter().sum();
    let weights: Vec<f64> = mass.iter().map(|m| m / total).collect();
    Ok((DiagGmm::new(weights, means, variances, reg)?, n_dead))
}

/// Per-column mean and biased variance.
pub fn column_mean_var(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0; d];
    for r in x.row_iter() {
        for j in 0..d {
            let diff = r[j] - mean[j];
            var[j] += diff * diff;
        }
    }
    var.iter_mut().for_each(|v| *v /= t);
    (mean, var)
}

/// k-means++ seeding: first center uniform, the rest drawn with probability
/// proportional to squared distance to the nearest chosen center.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let t = x.rows();
    let mut centers = Vec::with_capacity(k);
    centers.push(rng.random_range(0..t));
    let mut nearest: Vec<f64> = x.row_iter().map(|r| sq_dist(r, x.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the running sum.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..t)
        };
        centers.push(next);
        let c = x.row(next);
        for (n, r) in nearest.iter_mut().zip(x.row_iter()) {
            *n = n.min(sq_dist(r, c));
        }
    }
    x.select_rows(&centers)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
