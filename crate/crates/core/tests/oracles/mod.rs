//! Naive reference implementations used as test oracles.
//!
//! Everything here is written as direct scalar loops over the defining
//! formulas, without log-space tricks, chunking or shared helpers from the
//! library, so the library paths are checked against an independent route.
#![allow(dead_code)]

use std::f64::consts::PI;

use fvstage_core::attention::AttentionParams;
use fvstage_core::classifier::{forward, loss_and_grad, loss_from_logits, HeadParams};
use fvstage_core::metrics::{Labels, TaskKind};
use fvstage_core::{DiagGmm, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (r.random::<f64>() * 2.0 - 1.0) * scale)
}

/// Random mixture with weights bounded away from zero.
pub fn random_gmm(r: &mut impl Rng, k: usize, d: usize) -> DiagGmm {
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + r.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / s).collect();
    let means = Matrix::from_fn(k, d, |_, _| r.random::<f64>() * 4.0 - 2.0);
    let vars = Matrix::from_fn(k, d, |_, _| 0.3 + r.random::<f64>() * 1.5);
    DiagGmm::new(weights, means, vars, 0.0).unwrap()
}

/// `N(x | mu_k, diag(var_k))` by the textbook product formula.
pub fn gaussian_pdf(g: &DiagGmm, k: usize, x: &[f64]) -> f64 {
    let mut p = 1.0;
    for j in 0..x.len() {
        let v = g.variances()[(k, j)];
        let diff = x[j] - g.means()[(k, j)];
        p *= (-(diff * diff) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
    }
    p
}

/// `p(x) = sum_k w_k N(x | mu_k, Sigma_k)`.
pub fn mixture_pdf(g: &DiagGmm, x: &[f64]) -> f64 {
    (0..g.components()).map(|k| g.weights()[k] * gaussian_pdf(g, k, x)).sum()
}

/// Responsibility of component `k` for `x`.
pub fn posterior(g: &DiagGmm, k: usize, x: &[f64]) -> f64 {
    g.weights()[k] * gaussian_pdf(g, k, x) / mixture_pdf(g, x)
}

/// Fisher Vector gradients evaluated term by term, in the crate's vector layout.
pub fn fisher_naive(g: &DiagGmm, x: &Matrix) -> Vec<f64> {
    let (k, d, t) = (g.components(), g.dim(), x.rows());
    let tf = t as f64;
    let mut gw = vec![0.0; k];
    let mut gmu = vec![0.0; k * d];
    let mut gsig = vec![0.0; k * d];
    for c in 0..k {
        let w = g.weights()[c];
        let mut acc = 0.0;
        for i in 0..t {
            acc += posterior(g, c, x.row(i)) - w;
        }
        gw[c] = acc / (tf * w.sqrt());
        for j in 0..d {
            let mu = g.means()[(c, j)];
            let sd = g.variances()[(c, j)].sqrt();
            let (mut a, mut b) = (0.0, 0.0);
            for i in 0..t {
                let gam = posterior(g, c, x.row(i));
                let xv = x[(i, j)];
                a += gam * ((xv - mu) / sd);
                b += gam * ((xv - mu).powi(2) / sd.powi(2) - 1.0);
            }
            gmu[c * d + j] = a / (tf * w.sqrt());
            gsig[c * d + j] = b / (tf * (2.0 * w).sqrt());
        }
    }
    let mut out = gw;
    out.extend(gmu);
    out.extend(gsig);
    out
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

pub fn naive_qkv(x: &Matrix, p: &AttentionParams) -> (Matrix, Matrix, Matrix) {
    (naive_matmul(x, &p.w_q), naive_matmul(x, &p.w_k), naive_matmul(x, &p.w_v))
}

/// Softmax attention with an explicit similarity matrix and no max shift.
pub fn softmax_attention_naive(x: &Matrix, p: &AttentionParams) -> (Matrix, Matrix) {
    let (q, k, v) = naive_qkv(x, p);
    let n = x.rows();
    let d = q.cols() as f64;
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..q.cols() {
                s += q[(i, a)] * k[(j, a)];
            }
            sim[(i, j)] = (s / d.sqrt()).exp();
            z += sim[(i, j)];
        }
        for j in 0..n {
            sim[(i, j)] /= z;
        }
    }
    (naive_matmul(&sim, &v), sim)
}

/// ReLU attention via the quadratic similarity matrix.
pub fn relu_attention_naive(x: &Matrix, p: &AttentionParams, eps: f64) -> (Matrix, Matrix) {
    let (q, k, v) = naive_qkv(x, p);
    let n = x.rows();
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..q.cols() {
                s += q[(i, a)].max(0.0) * k[(j, a)].max(0.0);
            }
            sim[(i, j)] = s;
            denom += s;
        }
        for j in 0..n {
            sim[(i, j)] /= denom + eps;
        }
    }
    (naive_matmul(&sim, &v), sim)
}

/// O(n^2) pair count: (neg < pos, ties).
pub fn auc_pairs_brute(scores: &[f64], labels: &[bool]) -> (u64, u64) {
    let (mut less, mut ties) = (0, 0);
    for i in 0..scores.len() {
        if labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if !labels[j] {
                continue;
            }
            if scores[i] < scores[j] {
                less += 1;
            } else if scores[i] == scores[j] {
                ties += 1;
            }
        }
    }
    (less, ties)
}

/// Histogram entropy by scanning the bin edges for every value.
pub fn entropy_brute(values: &[f64], k: usize) -> f64 {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return 0.0;
    }
    let edge = |i: usize| (i as f64 / k as f64) * (max - min) + min;
    let mut counts = vec![0usize; k];
    for &x in values {
        let mut placed = false;
        for i in 1..=k {
            let lower_ok = if i == 1 { x >= edge(0) } else { x > edge(i - 1) };
            if lower_ok && x <= edge(i) {
                counts[i - 1] += 1;
                placed = true;
                break;
            }
        }
        assert!(placed, "value {x} fell outside every bin");
    }
    let n = values.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

/// Composite Simpson integral of `D(f||g)` for 1D mixtures on `[lo, hi]`.
pub fn kl_quadrature_1d(f: &DiagGmm, g: &DiagGmm, lo: f64, hi: f64, intervals: usize) -> f64 {
    let h = (hi - lo) / intervals as f64;
    let integrand = |x: f64| {
        let fx = mixture_pdf(f, &[x]);
        let gx = mixture_pdf(g, &[x]);
        if fx == 0.0 {
            0.0
        } else {
            fx * (fx / gx).ln()
        }
    };
    let mut s = integrand(lo) + integrand(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * integrand(lo + i as f64 * h);
    }
    s * h / 3.0
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Scalar-loop forward pass of the classifier head.
pub fn head_forward_naive(p: &HeadParams, x: &[f64]) -> Vec<f64> {
    let hidden = p.hidden();
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut s = p.b1[j];
        for i in 0..x.len() {
            s += x[i] * p.w1[(i, j)];
        }
        h[j] = s;
    }
    let mean = h.iter().sum::<f64>() / hidden as f64;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hidden as f64;
    let a: Vec<f64> = (0..hidden)
        .map(|j| gelu(p.ln_gain[j] * (h[j] - mean) / (var + 1e-5).sqrt() + p.ln_bias[j]))
        .collect();
    (0..p.outputs())
        .map(|o| p.b2[o] + (0..hidden).map(|j| a[j] * p.w2[(j, o)]).sum::<f64>())
        .collect()
}

/// Random head with non-trivial layer-norm parameters.
pub fn random_head(r: &mut impl Rng, input: usize, hidden: usize, outputs: usize) -> HeadParams {
    HeadParams {
        w1: random_matrix(r, input, hidden, 0.8),
        b1: (0..hidden).map(|_| r.random::<f64>() - 0.5).collect(),
        ln_gain: (0..hidden).map(|_| 0.5 + r.random::<f64>()).collect(),
        ln_bias: (0..hidden).map(|_| r.random::<f64>() - 0.5).collect(),
        w2: random_matrix(r, hidden, outputs, 0.8),
        b2: (0..outputs).map(|_| r.random::<f64>() - 0.5).collect(),
    }
}

/// Relative error with a magnitude floor so near-zero gradients compare on
/// an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter of `p`.
pub fn grad_check(p: &HeadParams, x: &Matrix, labels: &Labels, task: TaskKind) -> f64 {
    let h = 1e-5;
    let (_, g) = loss_and_grad(p, x, labels, task).unwrap();
    let analytic: Vec<f64> = g.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for block in 0..6 {
        let len = p.slices()[block].len();
        for i in 0..len {
            let mut plus = p.clone();
            plus.slices_mut()[block][i] += h;
            let mut minus = p.clone();
            minus.slices_mut()[block][i] -= h;
            let lp = loss_from_logits(&forward(&plus, x).unwrap(), labels, task).unwrap().0;
            let lm = loss_from_logits(&forward(&minus, x).unwrap(), labels, task).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[flat], numeric));
            flat += 1;
        }
    }
    worst
}

/// Random tiny classification instance for gradient checks.
pub fn tiny_instance(r: &mut impl Rng, task: TaskKind) -> (HeadParams, Matrix, Labels) {
    let input = r.random_range(2..=5);
    let hidden = r.random_range(2..=5);
    let n = r.random_range(1..=4);
    let outputs = match task {
        TaskKind::Binary => 2,
        _ => r.random_range(2..=4),
    };
    let p = random_head(r, input, hidden, outputs);
    let x = random_matrix(r, n, input, 1.5);
    let labels = match task {
        TaskKind::Multilabel => Labels::MultiHot((0..n).map(|_| (0..outputs).map(|_| r.random::<bool>()).collect()).collect()),
        _ => Labels::Class((0..n).map(|_| r.random_range(0..outputs)).collect()),
    };
    (p, x, labels)
}
