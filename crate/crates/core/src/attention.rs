//! Single-head softmax attention and ReLU linear attention.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, Matrix};
use crate::rng;

/// Denominator guard for ReLU linear attention.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttentionError {
    #[error("input has {found} features but the projections expect {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("attention needs at least one token")]
    NoTokens,
}

/// Query/key/value projections, each `input_dim x head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    ReluLinear,
}

impl AttentionParams {
    /// Draws all three projections uniformly on `[-1/sqrt(f), 1/sqrt(f)]`.
    pub fn random(input_dim: usize, head_dim: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let bound = 1.0 / libm::sqrt(input_dim as f64);
        let mut draw = || Matrix::from_fn(input_dim, head_dim, |_, _| rng::uniform_sym(&mut r, bound));
        let w_q = draw();
        let w_k = draw();
        let w_v = draw();
        Self { w_q, w_k, w_v, seed }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// Returns `(Q, K, V)` for token matrix `x`.
    pub fn project(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix), AttentionError> {
        if x.cols() != self.input_dim() {
            return Err(AttentionError::ShapeMismatch { expected: self.input_dim(), found: x.cols() });
        }
        if x.rows() == 0 {
            return Err(AttentionError::NoTokens);
        }
        Ok((x.matmul(&self.w_q), x.matmul(&self.w_k), x.matmul(&self.w_v)))
    }
}

/// Row-wise `softmax(Q K^T / sqrt(d))`.
pub fn softmax_similarity(q: &Matrix, k: &Matrix) -> Matrix {
    let scale = 1.0 / libm::sqrt(q.cols() as f64);
    let n = q.rows();
    let mut sim = Matrix::zeros(n, k.rows());
    for i in 0..n {
        let qi = q.row(i);
        let row = sim.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(qi, k.row(j)) * scale;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = libm::exp(*s - m);
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    sim
}

pub fn softmax_attention(x: &Matrix, params: &AttentionParams) -> Result<Matrix, AttentionError> {
    let (q, k, v) = params.project(x)?;
    Ok(softmax_similarity(&q, &k).matmul(&v))
}

fn relu(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)].max(0.0))
}

/// Explicit `N x N` ReLU similarity: row `i` is `relu(Q_i) relu(K_j)^T`
/// divided by `sum_j relu(Q_i) relu(K_j)^T + eps`.
pub fn relu_linear_similarity(q: &Matrix, k: &Matrix, eps: f64) -> Matrix {
    let (rq, rk) = (relu(q), relu(k));
    let mut sim = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let row = sim.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(rq.row(i), rk.row(j));
        }
        let denom: f64 = row.iter().sum::<f64>() + eps;
        for s in row.iter_mut() {
            *s /= denom;
        }
    }
    sim
}

/// ReLU linear attention in its linear-time form:
/// `out_i = relu(Q_i) (sum_j relu(K_j)^T V_j) / (relu(Q_i) . sum_j relu(K_j) + eps)`.
pub fn relu_linear_attention(
    x: &Matrix,
    params: &AttentionParams,
    eps: f64,
) -> Result<Matrix, AttentionError> {
    let (q, k, v) = params.project(x)?;
    let (rq, rk) = (relu(&q), relu(&k));
    let d = rq.cols();
    let dv = v.cols();
    // kv = relu(K)^T V  (d x dv), ksum = column sums of relu(K).
    let mut kv = Matrix::zeros(d, dv);
    let mut ksum = vec![0.0; d];
    for j in 0..rk.rows() {
        let kj = rk.row(j);
        let vj = v.row(j);
        for (a, &ka) in kj.iter().enumerate() {
            ksum[a] += ka;
            if ka != 0.0 {
                for (o, &vb) in kv.row_mut(a).iter_mut().zip(vj) {
                    *o += ka * vb;
                }
            }
        }
    }
    let mut out = Matrix::zeros(q.rows(), dv);
    for i in 0..rq.rows() {
        let qi = rq.row(i);
        let denom = dot(qi, &ksum) + eps;
        let mut acc: Vec<f64> = vec![0.0; dv];
        for (a, &qa) in qi.iter().enumerate() {
            if qa != 0.0 {
                for (o, &kvb) in acc.iter_mut().zip(kv.row(a)) {
                    *o += qa * kvb;
                }
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = a / denom;
        }
    }
    Ok(out)
}

pub fn attend(
    x: &Matrix,
    params: &AttentionParams,
    kind: AttentionKind,
    eps: f64,
) -> Result<Matrix, AttentionError> {
    match kind {
        AttentionKind::Softmax => softmax_attention(x, params),
        AttentionKind::ReluLinear => relu_linear_attention(x, params, eps),
    }
}
