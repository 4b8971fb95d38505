//! JSON dataset manifests.
//!
//! ```json
//! {"task": "multiclass", "num_labels": 3,
//!  "samples": [{"id": "a", "image_path": "img/a.pgm", "labels": [2]}]}
//! ```
//!
//! Binary tasks have `num_labels == 1` and one 0/1 label per sample,
//! multiclass tasks one class index, multilabel tasks a 0/1 vector of length
//! `num_labels`. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fvstage_core::metrics::{Labels, TaskKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?}: label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { id: String, label: u32, num_labels: usize },
    #[error("sample {id:?}: expected {expected} label entries, found {found}")]
    LabelArity { id: String, expected: usize, found: usize },
    #[error("sample {id:?}: missing path {path}")]
    MissingPath { id: String, path: PathBuf },
    #[error("invalid manifest: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_feature_paths: Option<Vec<PathBuf>>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub num_labels: usize,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(task: TaskKind, num_labels: usize, samples: Vec<SampleEntry>, base_dir: PathBuf) -> Self {
        Self { task, num_labels, samples, base_dir }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn image_path(&self, i: usize) -> Option<PathBuf> {
        self.samples[i].image_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn feature_paths(&self, i: usize) -> Option<Vec<PathBuf>> {
        self.samples[i].stage_feature_paths.as_ref().map(|v| v.iter().map(|p| self.resolve(p)).collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Label count `k` as used by the metrics.
    pub fn k(&self) -> usize {
        self.num_labels
    }

    /// Checks every type invariant; with `check_paths`, also that every
    /// referenced file exists.
    pub fn validate(&self, check_paths: bool) -> Result<(), ManifestError> {
        if self.num_labels == 0 {
            return Err(ManifestError::Invalid("num_labels must be positive"));
        }
        if self.task == TaskKind::Binary && self.num_labels != 1 {
            return Err(ManifestError::Invalid("binary manifests have num_labels == 1"));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(ManifestError::DuplicateId(s.id.clone()));
            }
            let (expected, bound) = match self.task {
                TaskKind::Binary => (1, 2),
                TaskKind::Multiclass => (1, self.num_labels as u32),
                TaskKind::Multilabel => (self.num_labels, 2),
            };
            if s.labels.len() != expected {
                return Err(ManifestError::LabelArity { id: s.id.clone(), expected, found: s.labels.len() });
            }
            if let Some(&label) = s.labels.iter().find(|&&l| l >= bound) {
                return Err(ManifestError::LabelOutOfRange { id: s.id.clone(), label, num_labels: self.num_labels });
            }
            if check_paths {
                let paths = s.image_path.iter().chain(s.stage_feature_paths.iter().flatten());
                for p in paths {
                    if !self.resolve(p).exists() {
                        return Err(ManifestError::MissingPath { id: s.id.clone(), path: p.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Labels {
        match self.task {
            TaskKind::Binary | TaskKind::Multiclass => {
                Labels::Class(self.samples.iter().map(|s| s.labels[0] as usize).collect())
            }
            TaskKind::Multilabel => {
                Labels::MultiHot(self.samples.iter().map(|s| s.labels.iter().map(|&l| l == 1).collect()).collect())
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_json()).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })
    }
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest, serde_json::Error> {
    let mut m: DatasetManifest = serde_json::from_str(text)?;
    m.base_dir = base_dir.to_path_buf();
    Ok(m)
}

/// Reads and validates a manifest, including path existence.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, &base).map_err(|source| ManifestError::Parse { path: path.to_path_buf(), source })?;
    m.validate(true)?;
    Ok(m)
}
