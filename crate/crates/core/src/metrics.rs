//! Accuracy, AUC and ROC curves for binary, multiclass and multilabel tasks.
//!
//! ACC is the mean over samples of the mean over label columns of
//! `1[Y == Z]`. AUC for one label is the fraction of (negative, positive)
//! pairs the score orders correctly; [`TiePolicy`] decides what a tied pair
//! is worth. Multiclass AUC is the unweighted one-vs-rest mean, multilabel
//! AUC the mean over labels.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("AUC is undefined without both positive and negative samples")]
    SingleClass,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("non-finite score")]
    NonFiniteScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
}

/// Ground truth or predictions for `n` samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Labels {
    /// One class index per sample (binary tasks use 0/1).
    Class(Vec<usize>),
    /// One 0/1 vector of length `k` per sample.
    MultiHot(Vec<Vec<bool>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::MultiHot(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::MultiHot(v) => Labels::MultiHot(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Strict inequality only: tied pairs count 0.
    Paper,
    /// Tied pairs count 1/2 (the usual AUC).
    #[default]
    Half,
}

/// Mean over samples of the fraction of labels predicted correctly.
pub fn accuracy(truth: &Labels, pred: &Labels) -> Result<f64, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::ShapeMismatch("sample counts differ"));
    }
    if truth.is_empty() {
        return Err(MetricsError::ShapeMismatch("no samples"));
    }
    let n = truth.len() as f64;
    match (truth, pred) {
        (Labels::Class(y), Labels::Class(z)) => {
            Ok(y.iter().zip(z).filter(|(a, b)| a == b).count() as f64 / n)
        }
        (Labels::MultiHot(y), Labels::MultiHot(z)) => {
            let mut total = 0.0;
            for (yi, zi) in y.iter().zip(z) {
                if yi.len() != zi.len() || yi.is_empty() {
                    return Err(MetricsError::ShapeMismatch("label vector lengths differ"));
                }
                let hits = yi.iter().zip(zi).filter(|(a, b)| a == b).count();
                total += hits as f64 / yi.len() as f64;
            }
            Ok(total / n)
        }
        _ => Err(MetricsError::ShapeMismatch("label kinds differ")),
    }
}

/// Hard predictions from a `n x outputs` score matrix: argmax (lowest index
/// on ties) for class tasks, `p >= 0.5` per label for multilabel.
pub fn predict_labels(scores: &Matrix, task: TaskKind) -> Labels {
    match task {
        TaskKind::Binary | TaskKind::Multiclass => Labels::Class(scores.row_iter().map(argmax).collect()),
        TaskKind::Multilabel => {
            Labels::MultiHot(scores.row_iter().map(|r| r.iter().map(|&p| p >= 0.5).collect()).collect())
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exact pair counts behind an AUC value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Pairs with `score(neg) < score(pos)`.
    pub ordered: u64,
    /// Pairs with equal scores.
    pub tied: u64,
    pub negatives: u64,
    pub positives: u64,
}

impl PairCounts {
    pub fn auc(&self, policy: TiePolicy) -> f64 {
        let denom = (self.negatives * self.positives) as f64;
        match policy {
            TiePolicy::Paper => self.ordered as f64 / denom,
            TiePolicy::Half => (2 * self.ordered + self.tied) as f64 / (2.0 * denom),
        }
    }
}

fn sorted_by_score(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, bool)>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(MetricsError::SingleClass);
    }
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    Ok(v)
}

/// Counts ordered and tied pairs in `O(n log n)`.
pub fn pair_counts(scores: &[f64], labels: &[bool]) -> Result<PairCounts, MetricsError> {
    let v = sorted_by_score(scores, labels)?;
    let (mut ordered, mut tied, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        ordered += gp * neg_below;
        tied += gp * gn;
        neg_below += gn;
        i = j;
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    Ok(PairCounts { ordered, tied, negatives: labels.len() as u64 - positives, positives })
}

pub fn auc_binary(scores: &[f64], labels: &[bool], policy: TiePolicy) -> Result<f64, MetricsError> {
    Ok(pair_counts(scores, labels)?.auc(policy))
}

/// ROC points `(fpr, tpr)`, thresholding at each distinct score from the
/// highest down. Starts at `(0, 0)` and ends at `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let mut v = sorted_by_score(scores, labels)?;
    v.reverse();
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut pts = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < v.len() {
        let s = v[i].0;
        while i < v.len() && v[i].0 == s {
            if v[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / n, tp / p));
    }
    Ok(pts)
}

/// Trapezoidal area under a polyline of `(x, y)` points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrAuc {
    pub macro_auc: f64,
    /// `None` for classes that are absent (or the only class) in the split.
    pub per_class: Vec<Option<f64>>,
}

fn column(scores: &Matrix, c: usize) -> Vec<f64> {
    scores.row_iter().map(|r| r[c]).collect()
}

fn macro_mean(per: &[Option<f64>]) -> Result<f64, MetricsError> {
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// One-vs-rest AUC with class `c` scored by column `c`.
pub fn auc_multiclass_ovr(scores: &Matrix, labels: &[usize], policy: TiePolicy) -> Result<OvrAuc, MetricsError> {
    if scores.rows() != labels.len() {
        return Err(MetricsError::ShapeMismatch("score rows and labels differ"));
    }
    let per_class = (0..scores.cols())
        .map(|c| {
            let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            match auc_binary(&column(scores, c), &bin, policy) {
                Ok(a) => Ok(Some(a)),
                Err(MetricsError::SingleClass) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OvrAuc { macro_auc: macro_mean(&per_class)?, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub n: usize,
    pub k: usize,
    pub tie_policy: TiePolicy,
    pub acc: f64,
    pub auc: f64,
    pub per_label_auc: Vec<Option<f64>>,
    pub roc_points: Vec<Option<Vec<(f64, f64)>>>,
}

/// Per-label binary problems `(scores, labels)` implied by the task.
fn label_problems(scores: &Matrix, truth: &Labels, task: TaskKind) -> Result<Vec<(Vec<f64>, Vec<bool>)>, MetricsError> {
    match (task, truth) {
        (TaskKind::Binary, Labels::Class(y)) => {
            if scores.cols() != 2 {
                return Err(MetricsError::ShapeMismatch("binary scores need two columns"));
            }
            Ok(vec![(column(scores, 1), y.iter().map(|&c| c == 1).collect())])
        }
        (TaskKind::Multiclass, Labels::Class(y)) => Ok((0..scores.cols())
            .map(|c| (column(scores, c), y.iter().map(|&l| l == c).collect()))
            .collect()),
        (TaskKind::Multilabel, Labels::MultiHot(y)) => {
            if y.iter().any(|r| r.len() != scores.cols()) {
                return Err(MetricsError::ShapeMismatch("label vectors and score columns differ"));
            }
            Ok((0..scores.cols()).map(|c| (column(scores, c), y.iter().map(|r| r[c]).collect())).collect())
        }
        _ => Err(MetricsError::ShapeMismatch("labels do not fit the task")),
    }
}

/// Full report from probability scores (`n x outputs`) and ground truth.
pub fn evaluate(scores: &Matrix, truth: &Labels, task: TaskKind, policy: TiePolicy) -> Result<MetricsReport, MetricsError> {
    if scores.rows() != truth.len() {
        return Err(MetricsError::ShapeMismatch("score rows and labels differ"));
    }
    let acc = accuracy(truth, &predict_labels(scores, task))?;
    let problems = label_problems(scores, truth, task)?;
    let mut per_label_auc = Vec::with_capacity(problems.len());
    let mut roc_points = Vec::with_capacity(problems.len());
    for (s, l) in &problems {
        match pair_counts(s, l) {
            Ok(c) => {
                per_label_auc.push(Some(c.auc(policy)));
                roc_points.push(Some(roc_curve(s, l)?));
            }
            Err(MetricsError::SingleClass) => {
                per_label_auc.push(None);
                roc_points.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let k = match task {
        TaskKind::Binary => 1,
        _ => scores.cols(),
    };
    Ok(MetricsReport {
        task,
        n: truth.len(),
        k,
        tie_policy: policy,
        acc,
        auc: macro_mean(&per_label_auc)?,
        per_label_auc,
        roc_points,
    })
}
