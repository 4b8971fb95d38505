//! Writing synthetic datasets to disk.

use std::fs;
use std::path::{Path, PathBuf};

use fvstage_core::metrics::TaskKind;
use fvstage_core::synth::{self, BlobImagesSpec, PlantedMixtureSpec, SplitName, SynthError};
use thiserror::Error;

use crate::manifest::{DatasetManifest, SampleEntry};
use crate::pgm::{self, PgmError};
use crate::tensorio::{self, Dtype, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SynthIoError {
    #[error(transparent)]
    Spec(#[from] SynthError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthIoError + '_ {
    move |source| SynthIoError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct BlobDataset {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Writes `images/<id>.pgm` plus `train.json`, `val.json` and `test.json`
/// under `out_dir`. Two classes make a binary task, more a multiclass one.
pub fn write_blob_dataset(spec: &BlobImagesSpec, out_dir: &Path) -> Result<BlobDataset, SynthIoError> {
    let samples = synth::gen_blob_images(spec)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io(&img_dir))?;
    let (task, num_labels) = match spec.classes.len() {
        2 => (TaskKind::Binary, 1),
        k => (TaskKind::Multiclass, k),
    };
    let mut paths = Vec::with_capacity(3);
    for split in SplitName::ALL {
        let mut entries = Vec::new();
        for s in samples.iter().filter(|s| s.split == split) {
            let rel = PathBuf::from("images").join(format!("{}.pgm", s.id));
            pgm::write_pgm(&out_dir.join(&rel), &s.image)?;
            entries.push(SampleEntry { id: s.id.clone(), image_path: Some(rel), stage_feature_paths: None, labels: vec![s.class as u32] });
        }
        let m = DatasetManifest::new(task, num_labels, entries, out_dir.to_path_buf());
        let path = out_dir.join(format!("{}.json", split.as_str()));
        fs::write(&path, m.to_json()).map_err(io(&path))?;
        paths.push(path);
    }
    let test = paths.pop().expect("three splits");
    let val = paths.pop().expect("three splits");
    let train = paths.pop().expect("three splits");
    Ok(BlobDataset { train, val, test })
}

/// Writes the planted samples (`samples.fvt`), their component assignment
/// (`assignment.fvt`) and the generating mixture (`truth.fvt` bundle).
pub fn write_planted(spec: &PlantedMixtureSpec, out_dir: &Path) -> Result<(), SynthIoError> {
    let s = synth::gen_planted_mixture(spec)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    tensorio::write_tensor(&out_dir.join("samples.fvt"), &Tensor::from_matrix(&s.x)?, Dtype::F64)?;
    let assign = Tensor::vector(s.assignment.iter().map(|&a| a as f64).collect())?;
    tensorio::write_tensor(&out_dir.join("assignment.fvt"), &assign, Dtype::F64)?;
    let meta = crate::store::GmmMeta {
        reg: 0.0,
        options: Default::default(),
        loglik_trace: Vec::new(),
        iterations: 0,
        converged: true,
        training_rows: 0,
    };
    crate::store::save_gmm(&out_dir.join("truth.fvt"), &s.truth, &meta)?;
    Ok(())
}
