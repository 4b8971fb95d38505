//! Brightness-histogram Shannon entropy and entropy ranking.
//!
//! The value range `[min, max]` is cut into `k` evenly spaced bins with edges
//! `X_i = (i/k)(max - min) + min`. Bin `i` owns the half-open interval
//! `(X_{i-1}, X_i]`, except that bin 1 is closed on the left so the minimum is
//! counted. The entropy is taken over the relative bin frequencies, in nats.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntropyError {
    #[error("cannot compute the entropy of an empty image")]
    EmptyImage,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("{ids} ids given for {values} entropies")]
    LengthMismatch { ids: usize, values: usize },
}

#[inline]
fn edge(i: usize, k: usize, min: f64, max: f64) -> f64 {
    (i as f64 / k as f64) * (max - min) + min
}

/// 1-based bin index of `x`, consistent with the edges returned by [`edge`].
fn bin_of(x: f64, k: usize, min: f64, max: f64) -> usize {
    let t = (x - min) / (max - min) * k as f64;
    let mut b = (libm::ceil(t) as isize).clamp(1, k as isize) as usize;
    // The closed-form guess can be off by one next to an edge; settle it
    // against the edges themselves.
    while b > 1 && x <= edge(b - 1, k, min, max) {
        b -= 1;
    }
    while b < k && x > edge(b, k, min, max) {
        b += 1;
    }
    b
}

/// Per-bin counts over `k` bins. Returns all counts in bin 1 when the value
/// range is degenerate.
pub fn histogram(values: &[f64], k: usize) -> Result<Vec<usize>, EntropyError> {
    if values.is_empty() {
        return Err(EntropyError::EmptyImage);
    }
    if k == 0 {
        return Err(EntropyError::ZeroBins);
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut counts = vec![0usize; k];
    if max == min {
        counts[0] = values.len();
        return Ok(counts);
    }
    for &x in values {
        counts[bin_of(x, k, min, max) - 1] += 1;
    }
    Ok(counts)
}

/// Entropy in nats of an arbitrary value set.
pub fn value_entropy(values: &[f64], k: usize) -> Result<f64, EntropyError> {
    let counts = histogram(values, k)?;
    let n = values.len() as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum::<f64>();
    // A single occupied bin yields -1*ln(1) = -0.0; report a clean zero.
    Ok(h.max(0.0))
}

pub fn image_entropy(image: &GrayImage, k: usize) -> Result<f64, EntropyError> {
    value_entropy(image.pixels(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub sample_id: String,
    pub entropy: f64,
}

/// Samples ordered by entropy, highest first; ties keep manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRanking {
    pub bins: usize,
    pub entries: Vec<RankEntry>,
}

/// Positions `0..entropies.len()` sorted by descending entropy, ties by position.
pub fn rank_order(entropies: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    // Stable sort keeps manifest order among equal entropies.
    order.sort_by(|&a, &b| {
        entropies[b].partial_cmp(&entropies[a]).unwrap_or(Ordering::Equal)
    });
    order
}

impl EntropyRanking {
    /// Ranks samples and keeps the top `cap` of them.
    pub fn build(
        ids: &[String],
        entropies: &[f64],
        bins: usize,
        cap: usize,
    ) -> Result<Self, EntropyError> {
        if ids.len() != entropies.len() {
            return Err(EntropyError::LengthMismatch { ids: ids.len(), values: entropies.len() });
        }
        let entries = rank_order(entropies)
            .into_iter()
            .take(cap)
            .map(|i| RankEntry { sample_id: ids[i].clone(), entropy: entropies[i] })
            .collect();
        Ok(Self { bins, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
