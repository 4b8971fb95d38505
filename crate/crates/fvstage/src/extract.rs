//! Running the toy backbone over a manifest and pooling stage features.

use std::fs;
use std::path::{Path, PathBuf};

use fvstage_core::backbone::{Backbone, BackboneError, StageFeatures};
use fvstage_core::entropy::{self, EntropyError, EntropyRanking};
use fvstage_core::stagecat::{SplitPlan, StagecatError};
use fvstage_core::Matrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::access::AccessLog;
use crate::manifest::DatasetManifest;
use crate::pgm::{self, PgmError};
use crate::tensorio::{self, Dtype, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("sample {id:?} has no {what}")]
    MissingInput { id: String, what: &'static str },
    #[error("sample {id:?}: {source}")]
    Image { id: String, source: PgmError },
    #[error("sample {id:?}: {source}")]
    Backbone { id: String, source: BackboneError },
    #[error("sample {id:?}: {source}")]
    Tensor { id: String, source: TensorError },
    #[error("sample {id:?}: {source}")]
    Stagecat { id: String, source: StagecatError },
    #[error("sample {id:?}: {source}")]
    Entropy { id: String, source: EntropyError },
    #[error("sample {id:?} lists {found} stages; at most four exist")]
    TooManyStages { id: String, found: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn load_image(m: &DatasetManifest, i: usize, log: &AccessLog) -> Result<fvstage_core::GrayImage, ExtractError> {
    let id = &m.samples[i].id;
    let path = m.image_path(i).ok_or_else(|| ExtractError::MissingInput { id: id.clone(), what: "image_path" })?;
    log.record(&path);
    pgm::read_pgm(&path).map_err(|source| ExtractError::Image { id: id.clone(), source })
}

/// Entropy of every image, ranked, keeping the top `cap`.
pub fn rank_and_select(m: &DatasetManifest, bins: usize, cap: usize, log: &AccessLog) -> Result<EntropyRanking, ExtractError> {
    let h = (0..m.len())
        .into_par_iter()
        .map(|i| {
            let img = load_image(m, i, log)?;
            entropy::image_entropy(&img, bins)
                .map_err(|source| ExtractError::Entropy { id: m.samples[i].id.clone(), source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = m.samples.iter().map(|s| s.id.clone()).collect();
    EntropyRanking::build(&ids, &h, bins, cap).map_err(|source| ExtractError::Entropy { id: String::new(), source })
}

/// Stage features of every sample, in manifest order.
pub fn extract_manifest(m: &DatasetManifest, backbone: &Backbone, log: &AccessLog) -> Result<Vec<Vec<StageFeatures>>, ExtractError> {
    (0..m.len())
        .into_par_iter()
        .map(|i| {
            let img = load_image(m, i, log)?;
            backbone.extract(&img).map_err(|source| ExtractError::Backbone { id: m.samples[i].id.clone(), source })
        })
        .collect()
}

/// Per-sample `T x d` local-feature matrices.
pub fn merge_all(m: &DatasetManifest, feats: &[Vec<StageFeatures>], plan: &SplitPlan) -> Result<Vec<Matrix>, ExtractError> {
    feats
        .iter()
        .zip(&m.samples)
        .map(|(f, s)| plan.merge(f).map_err(|source| ExtractError::Stagecat { id: s.id.clone(), source }))
        .collect()
}

fn file_stem(i: usize, id: &str) -> String {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{i:05}-{safe}")
}

/// Writes one tensor per (sample, stage) under `out_dir/features` and
/// returns the manifest augmented with their paths, to be saved in `out_dir`.
pub fn write_stage_features(
    m: &DatasetManifest,
    feats: &[Vec<StageFeatures>],
    out_dir: &Path,
) -> Result<DatasetManifest, ExtractError> {
    let dir = out_dir.join("features");
    fs::create_dir_all(&dir).map_err(|source| ExtractError::Io { path: dir.clone(), source })?;
    let mut out = m.clone();
    for (i, (f, s)) in feats.iter().zip(out.samples.iter_mut()).enumerate() {
        let mut paths = Vec::with_capacity(f.len());
        for stage in f {
            let rel = PathBuf::from("features").join(format!("{}.s{}.fvt", file_stem(i, &s.id), stage.stage_index));
            let t = Tensor::from_matrix(&stage.tokens).map_err(|source| ExtractError::Tensor { id: s.id.clone(), source })?;
            tensorio::write_tensor(&out_dir.join(&rel), &t, Dtype::F64)
                .map_err(|source| ExtractError::Tensor { id: s.id.clone(), source })?;
            paths.push(rel);
        }
        if let Some(img) = m.image_path(i) {
            let abs = fs::canonicalize(&img).map_err(|source| ExtractError::Io { path: img.clone(), source })?;
            s.image_path = Some(abs);
        }
        s.stage_feature_paths = Some(paths);
    }
    Ok(DatasetManifest::new(out.task, out.num_labels, out.samples, out_dir.to_path_buf()))
}

/// Reads stage tensors back from an augmented manifest. Stage indices count
/// down from the deepest stage, which is listed last.
pub fn read_stage_features(m: &DatasetManifest, log: &AccessLog) -> Result<Vec<Vec<StageFeatures>>, ExtractError> {
    (0..m.len())
        .into_par_iter()
        .map(|i| {
            let id = &m.samples[i].id;
            let paths = m.feature_paths(i).ok_or_else(|| ExtractError::MissingInput { id: id.clone(), what: "stage_feature_paths" })?;
            let last = fvstage_core::backbone::LAST_STAGE_INDEX;
            if paths.len() > last {
                return Err(ExtractError::TooManyStages { id: id.clone(), found: paths.len() });
            }
            let first = last + 1 - paths.len();
            paths
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    log.record(p);
                    let tokens = tensorio::read_tensor(p)
                        .and_then(Tensor::into_matrix)
                        .map_err(|source| ExtractError::Tensor { id: id.clone(), source })?;
                    Ok(StageFeatures { stage_index: first + j, tokens })
                })
                .collect()
        })
        .collect()
}
