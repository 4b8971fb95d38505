//! Two-layer classifier head over Fisher Vectors.
//!
//! `logits = GELU(LN(x W1 + b1)) W2 + b2`, where LN normalizes each sample
//! over the hidden units and applies a learned gain and bias. Class tasks
//! (binary included, with two outputs) use softmax cross-entropy; multilabel
//! tasks use per-label sigmoid cross-entropy averaged over labels.
//! Training is Adam with step decay and early stopping on validation loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::metrics::{Labels, TaskKind};
use crate::rng;

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifierError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("labels do not fit the task: {0}")]
    LabelMismatch(&'static str),
    #[error("training and validation splits must be non-empty")]
    EmptySplit,
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `fv_len x hidden`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// `hidden x outputs`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(input: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            ln_gain: vec![0.0; hidden],
            ln_bias: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, outputs),
            b2: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in initialization, zero biases, unit layer-norm gain.
    pub fn init(input: usize, hidden: usize, outputs: usize, seed: u64) -> Self {
        let mut r = rng::seeded_stream(seed, 0);
        let b1 = 1.0 / libm::sqrt(input as f64);
        let b2 = 1.0 / libm::sqrt(hidden as f64);
        let w1 = Matrix::from_fn(input, hidden, |_, _| rng::uniform_sym(&mut r, b1));
        let w2 = Matrix::from_fn(hidden, outputs, |_, _| rng::uniform_sym(&mut r, b2));
        Self { w1, w2, ln_gain: vec![1.0; hidden], ..Self::zeros(0, hidden, outputs) }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w2.cols()
    }

    /// All parameter tensors as flat slices, in declaration order.
    pub fn slices(&self) -> [&[f64]; 6] {
        [self.w1.as_slice(), &self.b1, &self.ln_gain, &self.ln_bias, self.w2.as_slice(), &self.b2]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.ln_gain,
            &mut self.ln_bias,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden(), self.outputs())
    }
}

/// Number of output units for a task with `k` labels (classes).
pub fn outputs_for(task: TaskKind, k: usize) -> usize {
    match task {
        TaskKind::Binary => 2,
        TaskKind::Multiclass | TaskKind::Multilabel => k,
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Intermediate activations kept for the backward pass.
struct Forward {
    xhat: Matrix,
    inv_std: Vec<f64>,
    pre_act: Matrix,
    act: Matrix,
    logits: Matrix,
}

/// `x W + b` for every row of `x`.
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    let row = |xr: &[f64], o: &mut [f64]| {
        o.copy_from_slice(b);
        for (k, &a) in xr.iter().enumerate() {
            if a != 0.0 {
                for (oj, &wj) in o.iter_mut().zip(w.row(k)) {
                    *oj += a * wj;
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let n = w.cols().max(1);
        out.as_mut_slice()
            .par_chunks_mut(n)
            .zip(x.as_slice().par_chunks(x.cols().max(1)))
            .for_each(|(o, xr)| row(xr, o));
    }
    #[cfg(not(feature = "parallel"))]
    for i in 0..x.rows() {
        row(x.row(i), out.row_mut(i));
    }
    out
}

/// `x^T g` accumulated over rows in a fixed order, written into `out`.
fn outer_accumulate(x: &Matrix, g: &Matrix, out: &mut Matrix) {
    let n = g.cols();
    let col = |i: usize, o: &mut [f64]| {
        for b in 0..x.rows() {
            let a = x[(b, i)];
            if a != 0.0 {
                for (oj, &gj) in o.iter_mut().zip(g.row(b)) {
                    *oj += a * gj;
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.as_mut_slice().par_chunks_mut(n.max(1)).enumerate().for_each(|(i, o)| col(i, o));
    }
    #[cfg(not(feature = "parallel"))]
    for i in 0..x.cols() {
        col(i, out.row_mut(i));
    }
    let _ = n;
}

fn forward_full(p: &HeadParams, x: &Matrix) -> Forward {
    let h = affine(x, &p.w1, &p.b1);
    let hidden = p.hidden();
    let mut xhat = Matrix::zeros(x.rows(), hidden);
    let mut pre_act = Matrix::zeros(x.rows(), hidden);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = h.row(i);
        let mean = r.iter().sum::<f64>() / hidden as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hidden as f64;
        let is = 1.0 / libm::sqrt(var + LN_EPS);
        inv_std.push(is);
        for j in 0..hidden {
            let xh = (r[j] - mean) * is;
            xhat[(i, j)] = xh;
            pre_act[(i, j)] = p.ln_gain[j] * xh + p.ln_bias[j];
        }
    }
    let act = Matrix::from_fn(x.rows(), hidden, |i, j| gelu(pre_act[(i, j)]));
    let logits = affine(&act, &p.w2, &p.b2);
    Forward { xhat, inv_std, pre_act, act, logits }
}

/// Logits for a batch of Fisher Vectors (`n x fv_len`).
pub fn forward(params: &HeadParams, x: &Matrix) -> Result<Matrix, ClassifierError> {
    if x.cols() != params.input_dim() {
        return Err(ClassifierError::ShapeMismatch("input width does not match W1"));
    }
    Ok(forward_full(params, x).logits)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(row.iter().map(|&z| libm::exp(z - m)).sum::<f64>());
    row.iter().map(|&z| z - lse).collect()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn check_labels(labels: &Labels, task: TaskKind, n: usize, outputs: usize) -> Result<(), ClassifierError> {
    if labels.len() != n {
        return Err(ClassifierError::LabelMismatch("label count differs from batch size"));
    }
    match (task, labels) {
        (TaskKind::Binary | TaskKind::Multiclass, Labels::Class(y)) => {
            if y.iter().any(|&c| c >= outputs) {
                return Err(ClassifierError::LabelMismatch("class index out of range"));
            }
        }
        (TaskKind::Multilabel, Labels::MultiHot(y)) => {
            if y.iter().any(|r| r.len() != outputs) {
                return Err(ClassifierError::LabelMismatch("label vector length differs from outputs"));
            }
        }
        _ => return Err(ClassifierError::LabelMismatch("label kind does not match task")),
    }
    Ok(())
}

/// Mean loss over the batch and `d loss / d logits`.
pub fn loss_from_logits(
    logits: &Matrix,
    labels: &Labels,
    task: TaskKind,
) -> Result<(f64, Matrix), ClassifierError> {
    let (n, k) = (logits.rows(), logits.cols());
    check_labels(labels, task, n, k)?;
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    match labels {
        Labels::Class(y) => {
            for i in 0..n {
                let ls = log_softmax(logits.row(i));
                loss -= ls[y[i]];
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    *g = (libm::exp(ls[j]) - if j == y[i] { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            loss /= n as f64;
        }
        Labels::MultiHot(y) => {
            let scale = 1.0 / (n * k) as f64;
            for i in 0..n {
                for j in 0..k {
                    let z = logits[(i, j)];
                    let t = if y[i][j] { 1.0 } else { 0.0 };
                    loss += z.max(0.0) - z * t + libm::log1p(libm::exp(-libm::fabs(z)));
                    grad[(i, j)] = (sigmoid(z) - t) * scale;
                }
            }
            loss *= scale;
        }
    }
    Ok((loss, grad))
}

/// Loss and analytic gradients for every parameter.
pub fn loss_and_grad(
    params: &HeadParams,
    x: &Matrix,
    labels: &Labels,
    task: TaskKind,
) -> Result<(f64, HeadParams), ClassifierError> {
    if x.cols() != params.input_dim() {
        return Err(ClassifierError::ShapeMismatch("input width does not match W1"));
    }
    let fw = forward_full(params, x);
    let (loss, dz) = loss_from_logits(&fw.logits, labels, task)?;
    let (n, hidden) = (x.rows(), params.hidden());
    let mut g = params.zeros_like();

    outer_accumulate(&fw.act, &dz, &mut g.w2);
    for r in dz.row_iter() {
        for (b, v) in g.b2.iter_mut().zip(r) {
            *b += v;
        }
    }
    // da = dz W2^T, then through GELU.
    let mut dy = Matrix::zeros(n, hidden);
    for i in 0..n {
        let dzi = dz.row(i);
        for j in 0..hidden {
            let da: f64 = params.w2.row(j).iter().zip(dzi).map(|(w, d)| w * d).sum();
            dy[(i, j)] = da * gelu_grad(fw.pre_act[(i, j)]);
        }
    }
    let mut dh = Matrix::zeros(n, hidden);
    for i in 0..n {
        let (dyi, xh) = (dy.row(i), fw.xhat.row(i));
        let mut mean_dx = 0.0;
        let mut mean_dx_xh = 0.0;
        for j in 0..hidden {
            g.ln_gain[j] += dyi[j] * xh[j];
            g.ln_bias[j] += dyi[j];
            let dx = dyi[j] * params.ln_gain[j];
            mean_dx += dx;
            mean_dx_xh += dx * xh[j];
        }
        mean_dx /= hidden as f64;
        mean_dx_xh /= hidden as f64;
        let is = fw.inv_std[i];
        for j in 0..hidden {
            let dx = dyi[j] * params.ln_gain[j];
            dh[(i, j)] = is * (dx - mean_dx - xh[j] * mean_dx_xh);
        }
    }
    outer_accumulate(x, &dh, &mut g.w1);
    for r in dh.row_iter() {
        for (b, v) in g.b1.iter_mut().zip(r) {
            *b += v;
        }
    }
    Ok((loss, g))
}

/// Class probabilities (softmax) or per-label probabilities (sigmoid).
pub fn predict_proba(params: &HeadParams, x: &Matrix, task: TaskKind) -> Result<Matrix, ClassifierError> {
    let mut z = forward(params, x)?;
    for i in 0..z.rows() {
        let r = z.row_mut(i);
        match task {
            TaskKind::Binary | TaskKind::Multiclass => {
                let ls = log_softmax(r);
                for (v, l) in r.iter_mut().zip(ls) {
                    *v = libm::exp(l);
                }
            }
            TaskKind::Multilabel => r.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: HeadParams,
    v: HeadParams,
    t: i32,
}

impl Adam {
    pub fn new(like: &HeadParams, cfg: AdamConfig) -> Self {
        Self { cfg, m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut HeadParams, grad: &HeadParams, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub hidden: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 20,
            decay_epochs: vec![10, 15],
            decay_factor: 0.1,
            batch_size: 16,
            seed: 0,
            early_stop_patience: 5,
            hidden: 512,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.lr > 0.0) {
            return Err(ClassifierError::BadConfig("lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(ClassifierError::BadConfig("epochs, batch size and hidden must be positive"));
        }
        if self.decay_epochs.iter().any(|&e| e == 0 || e > self.epochs) {
            return Err(ClassifierError::BadConfig("decay epochs must lie in [1, epochs]"));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`: multiplied by the decay
    /// factor once for every decay epoch already completed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.lr * libm::pow(self.decay_factor, passed as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// A design matrix with its labels.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub x: &'a Matrix,
    pub labels: &'a Labels,
}

pub fn train(
    train_set: Split<'_>,
    val_set: Split<'_>,
    task: TaskKind,
    outputs: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ClassifierError> {
    cfg.validate()?;
    if train_set.x.rows() == 0 || val_set.x.rows() == 0 {
        return Err(ClassifierError::EmptySplit);
    }
    if val_set.x.cols() != train_set.x.cols() {
        return Err(ClassifierError::ShapeMismatch("train and validation widths differ"));
    }
    check_labels(train_set.labels, task, train_set.x.rows(), outputs)?;
    check_labels(val_set.labels, task, val_set.x.rows(), outputs)?;

    let mut params = HeadParams::init(train_set.x.cols(), cfg.hidden, outputs, cfg.seed);
    let mut opt = Adam::new(&params, cfg.adam);
    let mut shuffle_rng = rng::seeded_stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train_set.x.rows()).collect();
    let mut best: Option<(f64, usize, HeadParams)> = None;
    let mut stale = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = train_set.x.select_rows(batch);
            let yb = train_set.labels.select(batch);
            let (loss, g) = loss_and_grad(&params, &xb, &yb, task)?;
            total += loss * batch.len() as f64;
            opt.step(&mut params, &g, lr);
        }
        let train_loss = total / order.len() as f64;
        let val_logits = forward(&params, val_set.x)?;
        let (val_loss, _) = loss_from_logits(&val_logits, val_set.labels, task)?;
        log.push(EpochLog { epoch, train_loss, val_loss, lr });

        match &best {
            Some((b, _, _)) if val_loss >= *b => {
                stale += 1;
                if stale > cfg.early_stop_patience {
                    break;
                }
            }
            _ => {
                best = Some((val_loss, epoch, params.clone()));
                stale = 0;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params, best_epoch, log })
}
