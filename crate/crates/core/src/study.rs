//! Sensitivity of the fitted GMM to entropy-ranked subsampling.
//!
//! A base mixture is fitted on the features of every sample. For each
//! `(ratio, seed)` cell, a mixture is refitted on the top `ceil(ratio * N)`
//! samples of the entropy ranking with that EM seed, and compared to the base
//! through a Monte-Carlo `KL(base || subset)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{self, EntropyError};
use crate::gmm::{self, DiagGmm, EmOptions, GmmError};
use crate::kl::{self, KlError};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StudyError {
    #[error("invalid study config: {0}")]
    BadConfig(&'static str),
    #[error("base fit failed: {0}")]
    BaseFit(GmmError),
    #[error("fit at ratio {ratio}, seed {seed}: {source}")]
    Fit { ratio: f64, seed: u64, source: GmmError },
    #[error("KL at ratio {ratio}, seed {seed}: {source}")]
    Kl { ratio: f64, seed: u64, source: KlError },
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub components: usize,
    /// EM settings; `em.seed` is the base-case seed.
    pub em: EmOptions,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub kl_samples: usize,
    pub kl_seed: u64,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        if self.ratios.is_empty() {
            return Err(StudyError::BadConfig("ratio list is empty"));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(StudyError::BadConfig("ratios must lie in (0, 1]"));
        }
        if self.seeds.len() < 2 {
            return Err(StudyError::BadConfig("need at least two seeds"));
        }
        if self.kl_samples == 0 {
            return Err(StudyError::BadConfig("kl_samples must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub ratio: f64,
    pub seed: u64,
    pub samples_used: usize,
    pub features_used: usize,
    pub kl_to_full: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub base: DiagGmm,
    pub rows: Vec<StudyRow>,
}

/// Number of samples kept at `ratio` out of `n` (at least one).
pub fn subset_size(ratio: f64, n: usize) -> usize {
    (libm::ceil(ratio * n as f64) as usize).clamp(1, n)
}

/// Runs the study on per-sample feature sets already sorted by descending
/// entropy.
pub fn run_subsample_study(ranked: &[Matrix], cfg: &StudyConfig) -> Result<StudyResult, StudyError> {
    cfg.validate()?;
    if ranked.is_empty() {
        return Err(StudyError::BadConfig("no samples"));
    }
    let all = Matrix::vstack(ranked).map_err(|_| StudyError::BadConfig("feature widths differ"))?;
    let base = gmm::fit_em(&all, cfg.components, &cfg.em).map_err(StudyError::BaseFit)?.gmm;

    let subsets: Vec<(f64, Matrix)> = cfg
        .ratios
        .iter()
        .map(|&ratio| (ratio, Matrix::vstack(&ranked[..subset_size(ratio, ranked.len())]).expect("widths checked above")))
        .collect();
    let cells: Vec<(usize, u64)> =
        (0..subsets.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let run = |&(i, seed): &(usize, u64)| -> Result<StudyRow, StudyError> {
        let (ratio, subset) = (subsets[i].0, &subsets[i].1);
        let opts = EmOptions { seed, ..cfg.em };
        let fit = gmm::fit_em(subset, cfg.components, &opts).map_err(|source| StudyError::Fit { ratio, seed, source })?;
        let est = kl::kl_mc(&base, &fit.gmm, cfg.kl_samples, cfg.kl_seed)
            .map_err(|source| StudyError::Kl { ratio, seed, source })?;
        Ok(StudyRow {
            ratio,
            seed,
            samples_used: subset_size(ratio, ranked.len()),
            features_used: subset.rows(),
            kl_to_full: est.value,
            std_error: est.std_error,
        })
    };
    // cells are independent; results keep (ratio, seed) order either way
    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        cells.par_iter().map(run).collect::<Result<Vec<_>, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows = cells.iter().map(run).collect::<Result<Vec<_>, _>>()?;
    Ok(StudyResult { base, rows })
}

/// Orders feature sets by the entropy of their pooled values, treating the
/// set like an image whose brightness values are the feature entries.
pub fn rank_feature_sets(sets: &[Matrix], bins: usize) -> Result<Vec<usize>, StudyError> {
    let h = sets
        .iter()
        .map(|m| entropy::value_entropy(m.as_slice(), bins))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(entropy::rank_order(&h))
}

/// Splits the rows of `x` into consecutive groups of `per_group` rows (the
/// last group may be shorter).
pub fn group_rows(x: &Matrix, per_group: usize) -> Vec<Matrix> {
    let per_group = per_group.max(1);
    (0..x.rows())
        .step_by(per_group)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + per_group).min(x.rows())).collect();
            x.select_rows(&idx)
        })
        .collect()
}

/// Median of the KL values of the rows at `ratio`.
pub fn median_kl(rows: &[StudyRow], ratio: f64) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.ratio == ratio).map(|r| r.kl_to_full).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg(ratios: Vec<f64>) -> StudyConfig {
        StudyConfig {
            components: 2,
            em: EmOptions { seed: 5, ..EmOptions::default() },
            ratios,
            seeds: vec![5, 6],
            kl_samples: 2000,
            kl_seed: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(matches!(cfg(vec![]).validate(), Err(StudyError::BadConfig(_))));
        assert!(matches!(cfg(vec![0.0]).validate(), Err(StudyError::BadConfig(_))));
        let mut c = cfg(vec![0.5]);
        c.seeds = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn subset_sizes() {
        assert_eq!(subset_size(0.1, 200), 20);
        assert_eq!(subset_size(0.001, 200), 1);
        assert_eq!(subset_size(1.0, 200), 200);
    }

    #[test]
    fn full_ratio_with_base_seed_is_exactly_zero() {
        let x = Matrix::from_fn(400, 1, |i, _| if i % 2 == 0 { (i % 7) as f64 * 0.1 } else { 5.0 + (i % 5) as f64 * 0.1 });
        let groups = group_rows(&x, 20);
        let r = run_subsample_study(&groups, &cfg(vec![1.0])).unwrap();
        let same = r.rows.iter().find(|row| row.seed == 5).unwrap();
        assert_eq!(same.kl_to_full, 0.0);
        assert_eq!(same.features_used, 400);
    }

    #[test]
    fn median_of_even_and_odd() {
        let row = |kl| StudyRow { ratio: 0.5, seed: 0, samples_used: 1, features_used: 1, kl_to_full: kl, std_error: 0.0 };
        assert_eq!(median_kl(&[row(3.0), row(1.0), row(2.0)], 0.5), Some(2.0));
        assert_eq!(median_kl(&[row(3.0), row(1.0)], 0.5), Some(2.0));
        assert_eq!(median_kl(&[row(3.0)], 0.1), None);
    }
}
