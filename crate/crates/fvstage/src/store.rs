//! On-disk forms of fitted mixtures, classifier heads and feature sets, all
//! as `FVT1` bundles with a JSON sidecar.

use std::path::Path;

use fvstage_core::classifier::{HeadParams, TrainConfig};
use fvstage_core::gmm::{DiagGmm, EmOptions};
use fvstage_core::metrics::TaskKind;
use fvstage_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::tensorio::{read_bundle, write_bundle, Bundle, Tensor, TensorError};

fn invalid(path: &Path, reason: impl ToString) -> TensorError {
    TensorError::Bundle { path: path.to_path_buf(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmMeta {
    pub reg: f64,
    pub options: EmOptions,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub training_rows: usize,
}

pub fn save_gmm(path: &Path, gmm: &DiagGmm, meta: &GmmMeta) -> Result<(), TensorError> {
    let b = Bundle {
        tensors: vec![
            ("weights".into(), Tensor::vector(gmm.weights().to_vec())?),
            ("means".into(), Tensor::from_matrix(gmm.means())?),
            ("variances".into(), Tensor::from_matrix(gmm.variances())?),
        ],
        meta,
    };
    write_bundle(path, &b)
}

pub fn load_gmm(path: &Path) -> Result<(DiagGmm, GmmMeta), TensorError> {
    let mut b: Bundle<GmmMeta> = read_bundle(path)?;
    let w = b.take("weights")?.into_data();
    let mu = b.take("means")?.into_matrix()?;
    let var = b.take("variances")?.into_matrix()?;
    let g = DiagGmm::new(w, mu, var, b.meta.reg).map_err(|e| invalid(path, e))?;
    Ok((g, b.meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub task: TaskKind,
    pub num_labels: usize,
    pub train: TrainConfig,
    pub best_epoch: usize,
}

const HEAD_TENSORS: [&str; 6] = ["w1", "b1", "ln_gain", "ln_bias", "w2", "b2"];

pub fn save_head(path: &Path, p: &HeadParams, meta: &HeadMeta) -> Result<(), TensorError> {
    let tensors = vec![
        ("w1".into(), Tensor::from_matrix(&p.w1)?),
        ("b1".into(), Tensor::vector(p.b1.clone())?),
        ("ln_gain".into(), Tensor::vector(p.ln_gain.clone())?),
        ("ln_bias".into(), Tensor::vector(p.ln_bias.clone())?),
        ("w2".into(), Tensor::from_matrix(&p.w2)?),
        ("b2".into(), Tensor::vector(p.b2.clone())?),
    ];
    write_bundle(path, &Bundle { tensors, meta })
}

pub fn load_head(path: &Path) -> Result<(HeadParams, HeadMeta), TensorError> {
    let mut b: Bundle<HeadMeta> = read_bundle(path)?;
    let mut t = HEAD_TENSORS.iter().map(|n| b.take(n)).collect::<Result<Vec<_>, _>>()?.into_iter();
    let mut next = || t.next().expect("six tensors");
    let w1 = next().into_matrix()?;
    let b1 = next().into_data();
    let ln_gain = next().into_data();
    let ln_bias = next().into_data();
    let w2 = next().into_matrix()?;
    let b2 = next().into_data();
    let h = w1.cols();
    if b1.len() != h || ln_gain.len() != h || ln_bias.len() != h || w2.rows() != h || b2.len() != w2.cols() {
        return Err(invalid(path, "head tensor shapes disagree"));
    }
    Ok((HeadParams { w1, b1, ln_gain, ln_bias, w2, b2 }, b.meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetMeta {
    pub ids: Vec<String>,
    pub rows_per_sample: Vec<usize>,
}

/// Per-sample local-feature matrices of one common width, stored stacked.
pub fn save_feature_sets(path: &Path, ids: &[String], sets: &[Matrix]) -> Result<(), TensorError> {
    let stacked = Matrix::vstack(sets).map_err(|_| invalid(path, "feature widths differ"))?;
    let meta = FeatureSetMeta { ids: ids.to_vec(), rows_per_sample: sets.iter().map(Matrix::rows).collect() };
    write_bundle(path, &Bundle { tensors: vec![("features".into(), Tensor::from_matrix(&stacked)?)], meta })
}

pub fn load_feature_sets(path: &Path) -> Result<(Vec<String>, Vec<Matrix>), TensorError> {
    let mut b: Bundle<FeatureSetMeta> = read_bundle(path)?;
    let all = b.take("features")?.into_matrix()?;
    if b.meta.rows_per_sample.iter().sum::<usize>() != all.rows() || b.meta.ids.len() != b.meta.rows_per_sample.len() {
        return Err(invalid(path, "row counts disagree with the stacked features"));
    }
    let mut start = 0;
    let sets = b
        .meta
        .rows_per_sample
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (start..start + n).collect();
            start += n;
            all.select_rows(&idx)
        })
        .collect();
    Ok((b.meta.ids, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvMeta {
    pub ids: Vec<String>,
    pub alpha: f64,
    pub components: usize,
    pub dim: usize,
}

/// One normalized Fisher Vector per row.
pub fn save_fvs(path: &Path, fvs: &Matrix, meta: &FvMeta) -> Result<(), TensorError> {
    write_bundle(path, &Bundle { tensors: vec![("fv".into(), Tensor::from_matrix(fvs)?)], meta })
}

pub fn load_fvs(path: &Path) -> Result<(Matrix, FvMeta), TensorError> {
    let mut b: Bundle<FvMeta> = read_bundle(path)?;
    let fv = b.take("fv")?.into_matrix()?;
    if fv.rows() != b.meta.ids.len() {
        return Err(invalid(path, "row count differs from id list"));
    }
    Ok((fv, b.meta))
}
