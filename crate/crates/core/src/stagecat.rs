//! Lossless concatenation of tokens from stages of different widths.
//!
//! Every `d_i`-wide token is cut into `c_i = d_i / d` contiguous chunks of a
//! common width `d` (by default the GCD of all stage widths). Rows of the
//! merged matrix are ordered by stage, then token, then chunk.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::StageFeatures;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StagecatError {
    #[error("stage dims must be positive and non-empty")]
    BadDims,
    #[error("common dim {common} does not divide stage dim {dim}")]
    NotADivisor { common: usize, dim: usize },
    #[error("features do not match the plan: {0}")]
    PlanMismatch(&'static str),
    #[error("merged matrix has {found} rows, expected {expected}")]
    SizeMismatch { expected: usize, found: usize },
}

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

pub fn gcd_all(values: &[usize]) -> usize {
    values.iter().fold(0, |g, &v| gcd(g, v))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub stage_dims: Vec<usize>,
    pub common_dim: usize,
    pub chunk_counts: Vec<usize>,
}

impl SplitPlan {
    /// Plan with the GCD of `stage_dims` as the common width.
    pub fn new(stage_dims: &[usize]) -> Result<Self, StagecatError> {
        if stage_dims.is_empty() || stage_dims.contains(&0) {
            return Err(StagecatError::BadDims);
        }
        Self::with_common_dim(stage_dims, gcd_all(stage_dims))
    }

    /// Plan with an explicit common width, which must divide every stage dim.
    pub fn with_common_dim(stage_dims: &[usize], common: usize) -> Result<Self, StagecatError> {
        if stage_dims.is_empty() || stage_dims.contains(&0) || common == 0 {
            return Err(StagecatError::BadDims);
        }
        if let Some(&dim) = stage_dims.iter().find(|&&d| d % common != 0) {
            return Err(StagecatError::NotADivisor { common, dim });
        }
        Ok(Self {
            stage_dims: stage_dims.to_vec(),
            common_dim: common,
            chunk_counts: stage_dims.iter().map(|d| d / common).collect(),
        })
    }

    /// `T = sum_i N_i c_i` for the given per-stage token counts.
    pub fn merged_rows(&self, token_counts: &[usize]) -> usize {
        token_counts.iter().zip(&self.chunk_counts).map(|(n, c)| n * c).sum()
    }

    pub fn merge(&self, features: &[StageFeatures]) -> Result<Matrix, StagecatError> {
        let mats: Vec<&Matrix> = features.iter().map(|f| &f.tokens).collect();
        self.merge_matrices(&mats)
    }

    /// Same as [`SplitPlan::merge`] on bare token matrices.
    pub fn merge_matrices(&self, stages: &[&Matrix]) -> Result<Matrix, StagecatError> {
        if stages.len() != self.stage_dims.len() {
            return Err(StagecatError::PlanMismatch("stage count"));
        }
        if stages.iter().zip(&self.stage_dims).any(|(m, &d)| m.cols() != d) {
            return Err(StagecatError::PlanMismatch("stage dim"));
        }
        let d = self.common_dim;
        let counts: Vec<usize> = stages.iter().map(|m| m.rows()).collect();
        let rows = self.merged_rows(&counts);
        let mut data = Vec::with_capacity(rows * d);
        // A row-major token cut into contiguous d-wide chunks is the same
        // buffer read d values at a time.
        for m in stages {
            data.extend_from_slice(m.as_slice());
        }
        Ok(Matrix::from_vec(rows, d, data).expect("row count formula"))
    }

    /// Inverse of [`SplitPlan::merge`]. `stage_indices` labels the output.
    pub fn unmerge(
        &self,
        merged: &Matrix,
        token_counts: &[usize],
        stage_indices: &[usize],
    ) -> Result<Vec<StageFeatures>, StagecatError> {
        if token_counts.len() != self.stage_dims.len() || stage_indices.len() != token_counts.len() {
            return Err(StagecatError::PlanMismatch("stage count"));
        }
        if merged.cols() != self.common_dim {
            return Err(StagecatError::PlanMismatch("common dim"));
        }
        let expected = self.merged_rows(token_counts);
        if merged.rows() != expected {
            return Err(StagecatError::SizeMismatch { expected, found: merged.rows() });
        }
        let buf = merged.as_slice();
        let mut offset = 0;
        let mut out = Vec::with_capacity(token_counts.len());
        for ((&n, &dim), &index) in token_counts.iter().zip(&self.stage_dims).zip(stage_indices) {
            let len = n * dim;
            let tokens = Matrix::from_vec(n, dim, buf[offset..offset + len].to_vec())
                .expect("lengths checked above");
            offset += len;
            out.push(StageFeatures { stage_index: index, tokens });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn plans_match_known_values() {
        let p = SplitPlan::new(&[384, 192]).unwrap();
        assert_eq!((p.common_dim, p.chunk_counts.clone()), (192, vec![2, 1]));
        let p = SplitPlan::new(&[384]).unwrap();
        assert_eq!((p.common_dim, p.chunk_counts.clone()), (384, vec![1]));
        let p = SplitPlan::new(&[6, 4]).unwrap();
        assert_eq!((p.common_dim, p.chunk_counts), (2, vec![3, 2]));
    }

    #[test]
    fn override_must_divide() {
        assert_eq!(
            SplitPlan::with_common_dim(&[6, 4], 3),
            Err(StagecatError::NotADivisor { common: 3, dim: 4 })
        );
        assert_eq!(SplitPlan::with_common_dim(&[96, 192], 48).unwrap().chunk_counts, vec![2, 4]);
    }

    #[test]
    fn one_token_is_cut_into_contiguous_chunks() {
        let plan = SplitPlan::with_common_dim(&[6], 2).unwrap();
        let f = StageFeatures {
            stage_index: 4,
            tokens: Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap(),
        };
        let m = plan.merge(&[f]).unwrap();
        assert_eq!(m, Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
    }

    #[test]
    fn single_stage_identity() {
        let plan = SplitPlan::new(&[3]).unwrap();
        let t = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let m = plan.merge(&[StageFeatures { stage_index: 4, tokens: t.clone() }]).unwrap();
        assert_eq!(m, t);
    }

    #[test]
    fn row_count_for_two_default_stages() {
        let plan = SplitPlan::new(&[96, 192]).unwrap();
        assert_eq!(plan.merged_rows(&[49, 16]), 81);
    }

    #[test]
    fn unmerge_rejects_wrong_row_count() {
        let plan = SplitPlan::new(&[2, 4]).unwrap();
        let m = Matrix::zeros(4, 2);
        assert_eq!(
            plan.unmerge(&m, &[1, 1], &[3, 4]),
            Err(StagecatError::SizeMismatch { expected: 3, found: 4 })
        );
    }

    #[test]
    fn merge_rejects_wrong_dims() {
        let plan = SplitPlan::new(&[2, 4]).unwrap();
        let f = StageFeatures { stage_index: 4, tokens: Matrix::zeros(1, 2) };
        assert!(matches!(plan.merge(&[f.clone(), f]), Err(StagecatError::PlanMismatch(_))));
    }
}
