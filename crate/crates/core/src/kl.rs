//! Monte-Carlo KL divergence between mixtures.
//!
//! `D(f||g) ~ (1/n) sum_i [ln f(x_i) - ln g(x_i)]` with `x_i ~ f`. Samples are
//! drawn in fixed-size chunks, each from its own ChaCha stream, and chunk
//! statistics are merged in chunk order, so the estimate does not depend on
//! how chunks are scheduled.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::DiagGmm;
use crate::rng;

pub const DEFAULT_SAMPLES: usize = 1_000_000;
pub const CHUNK_SIZE: usize = 16_384;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KlError {
    #[error("mixtures live in different dimensions ({f} vs {g})")]
    DimMismatch { f: usize, g: usize },
    #[error("need at least one sample")]
    NoSamples,
    #[error("closed form needs single-component mixtures")]
    NotSingleComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub rng: alloc::string::String,
}

/// Running count, mean and sum of squared deviations of the log-ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChunkStats {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
}

impl ChunkStats {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    /// Chan et al. pairwise merge.
    pub fn merge(self, other: ChunkStats) -> ChunkStats {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        ChunkStats {
            count: self.count + other.count,
            mean: self.mean + delta * other.count as f64 / n,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * other.count as f64 / n,
        }
    }
}

pub fn chunk_count(n: usize) -> usize {
    n.div_ceil(CHUNK_SIZE)
}

/// Log-ratio statistics of chunk `index` of an `n`-sample estimate.
pub fn kl_chunk(f: &DiagGmm, g: &DiagGmm, n: usize, seed: u64, index: usize) -> ChunkStats {
    let start = index * CHUNK_SIZE;
    let len = CHUNK_SIZE.min(n.saturating_sub(start));
    let mut r = rng::seeded_stream(seed, index as u64);
    let xs = f.sample_with(&mut r, len);
    let mut bf = vec![0.0; f.components()];
    let mut bg = vec![0.0; g.components()];
    let mut stats = ChunkStats::default();
    for x in xs.row_iter() {
        let lf = f.joint_log_densities(x, &mut bf);
        let lg = g.joint_log_densities(x, &mut bg);
        stats.push(lf - lg);
    }
    stats
}

fn check(f: &DiagGmm, g: &DiagGmm, n: usize) -> Result<(), KlError> {
    if f.dim() != g.dim() {
        return Err(KlError::DimMismatch { f: f.dim(), g: g.dim() });
    }
    if n == 0 {
        return Err(KlError::NoSamples);
    }
    Ok(())
}

/// Folds per-chunk statistics (in chunk order) into an estimate.
pub fn finish(chunks: &[ChunkStats], seed: u64) -> KlEstimate {
    let total = chunks.iter().fold(ChunkStats::default(), |acc, c| acc.merge(*c));
    let n = total.count;
    let var = if n > 1 { total.m2 / (n - 1) as f64 } else { 0.0 };
    KlEstimate {
        value: total.mean,
        std_error: libm::sqrt(var.max(0.0) / n as f64),
        n_samples: n,
        seed,
        rng: rng::RNG_ALGORITHM.into(),
    }
}

/// Monte-Carlo estimate of `D(f||g)` from `n` samples of `f`.
pub fn kl_mc(f: &DiagGmm, g: &DiagGmm, n: usize, seed: u64) -> Result<KlEstimate, KlError> {
    check(f, g, n)?;
    #[cfg(feature = "parallel")]
    let chunks: Vec<ChunkStats> = {
        use rayon::prelude::*;
        (0..chunk_count(n)).into_par_iter().map(|i| kl_chunk(f, g, n, seed, i)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<ChunkStats> = (0..chunk_count(n)).map(|i| kl_chunk(f, g, n, seed, i)).collect();
    Ok(finish(&chunks, seed))
}

/// Closed-form KL between two single diagonal Gaussians.
pub fn kl_gaussian_closed(f: &DiagGmm, g: &DiagGmm) -> Result<f64, KlError> {
    if f.components() != 1 || g.components() != 1 {
        return Err(KlError::NotSingleComponent);
    }
    if f.dim() != g.dim() {
        return Err(KlError::DimMismatch { f: f.dim(), g: g.dim() });
    }
    let (mf, vf) = (f.means().row(0), f.variances().row(0));
    let (mg, vg) = (g.means().row(0), g.variances().row(0));
    Ok((0..f.dim())
        .map(|j| {
            let dm = mf[j] - mg[j];
            0.5 * libm::log(vg[j] / vf[j]) + (vf[j] + dm * dm) / (2.0 * vg[j]) - 0.5
        })
        .sum())
}
