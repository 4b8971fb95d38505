//! Subsampling-robustness study runners and table output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fvstage_core::study::{self, StudyConfig, StudyError, StudyResult, StudyRow};
use fvstage_core::synth::{self, PlantedMixtureSpec, SynthError};
use fvstage_core::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyRunError {
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Features from a planted mixture, cut into per-sample groups of
/// consecutive rows and ranked by the entropy of each group's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStudy {
    pub total: usize,
    pub per_sample: usize,
    pub data_seed: u64,
    pub bins: usize,
    pub study: StudyConfig,
}

impl PlantedStudy {
    /// 20,000 features from four 2D components, 100 per sample.
    pub fn desk_scale(study: StudyConfig) -> Self {
        Self { total: 20_000, per_sample: 100, data_seed: 7, bins: 256, study }
    }
}

pub fn ranked_planted_sets(p: &PlantedStudy) -> Result<Vec<Matrix>, StudyRunError> {
    let s = synth::gen_planted_mixture(&PlantedMixtureSpec::four_component_2d(p.total, p.data_seed))?;
    let groups = study::group_rows(&s.x, p.per_sample);
    let order = study::rank_feature_sets(&groups, p.bins)?;
    Ok(order.into_iter().map(|i| groups[i].clone()).collect())
}

pub fn run_planted(p: &PlantedStudy) -> Result<StudyResult, StudyRunError> {
    Ok(study::run_subsample_study(&ranked_planted_sets(p)?, &p.study)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub ratio: f64,
    pub median_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub medians: Vec<MedianRow>,
}

impl StudyTable {
    pub fn from_rows(rows: Vec<StudyRow>, ratios: &[f64]) -> Self {
        let medians = ratios
            .iter()
            .filter_map(|&r| study::median_kl(&rows, r).map(|m| MedianRow { ratio: r, median_kl: m }))
            .collect();
        Self { rows, medians }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio,seed,samples_used,features_used,kl_to_full,std_error\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{:e},{:e}", r.ratio, r.seed, r.samples_used, r.features_used, r.kl_to_full, r.std_error)
                .expect("string write");
        }
        s
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<(), std::io::Error> {
        fs::write(json, serde_json::to_string_pretty(self).expect("table serializes") + "\n")?;
        fs::write(csv, self.to_csv())
    }
}
