//! Fisher Vector encoding against a diagonal GMM.
//!
//! For local features `x_1..x_T` and responsibilities `gamma_k(x_t)`:
//!
//! ```text
//! G_w[k]     = 1/(T sqrt(w_k))  * sum_t (gamma_k(x_t) - w_k)
//! G_mu[k,j]  = 1/(T sqrt(w_k))  * sum_t gamma_k(x_t) (x_tj - mu_kj) / sigma_kj
//! G_sig[k,j] = 1/(T sqrt(2 w_k)) * sum_t gamma_k(x_t) ((x_tj - mu_kj)^2 / sigma_kj^2 - 1)
//! ```
//!
//! laid out as `[G_w (K) | G_mu (K*d, component-major) | G_sig (K*d)]`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{DiagGmm, GmmError};
use crate::matrix::Matrix;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FisherError {
    #[error("cannot encode an empty feature set")]
    EmptyFeatureSet,
    #[error("feature dim {found} does not match the mixture dim {expected}")]
    DimMismatch { expected: usize, found: usize },
}

impl From<GmmError> for FisherError {
    fn from(e: GmmError) -> Self {
        match e {
            GmmError::DimMismatch { expected, found } => FisherError::DimMismatch { expected, found },
            // posteriors only fails on dimension checks
            _ => unreachable!("unexpected mixture error: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

/// `K (2d + 1)`.
pub const fn fv_length(components: usize, dim: usize) -> usize {
    components * (2 * dim + 1)
}

/// Unnormalized Fisher Vector of the rows of `x`.
pub fn encode(gmm: &DiagGmm, x: &Matrix) -> Result<FisherVector, FisherError> {
    if x.rows() == 0 {
        return Err(FisherError::EmptyFeatureSet);
    }
    let gamma = gmm.posteriors(x)?;
    let (k, d, t) = (gmm.components(), gmm.dim(), x.rows());

    // Zeroth, first and second order statistics in whitened coordinates.
    let mut s0 = vec![0.0; k];
    let mut s1 = Matrix::zeros(k, d);
    let mut s2 = Matrix::zeros(k, d);
    let sigma = Matrix::from_fn(k, d, |c, j| libm::sqrt(gmm.variances()[(c, j)]));
    for i in 0..t {
        let (xr, g) = (x.row(i), gamma.row(i));
        for c in 0..k {
            let gc = g[c];
            s0[c] += gc;
            if gc == 0.0 {
                continue;
            }
            let (mu, sd) = (gmm.means().row(c), sigma.row(c));
            let (r1, r2) = (s1.row_mut(c), s2.row_mut(c));
            for j in 0..d {
                let z = (xr[j] - mu[j]) / sd[j];
                r1[j] += gc * z;
                r2[j] += gc * (z * z - 1.0);
            }
        }
    }

    let tf = t as f64;
    let mut values = vec![0.0; fv_length(k, d)];
    let (gw, rest) = values.split_at_mut(k);
    let (gmu, gsig) = rest.split_at_mut(k * d);
    for c in 0..k {
        let w = gmm.weights()[c];
        let sw = libm::sqrt(w);
        // sum_t (gamma - w) = s0 - T w
        gw[c] = (s0[c] - tf * w) / (tf * sw);
        let a = 1.0 / (tf * sw);
        let b = 1.0 / (tf * libm::sqrt(2.0 * w));
        for j in 0..d {
            gmu[c * d + j] = a * s1[(c, j)];
            gsig[c * d + j] = b * s2[(c, j)];
        }
    }
    Ok(FisherVector { values, normalized: false })
}

/// Signed power `sign(z)|z|^alpha` followed by global L2 normalization.
/// The zero vector stays zero.
pub fn normalize(mut fv: FisherVector, alpha: f64) -> FisherVector {
    for v in fv.values.iter_mut() {
        *v = libm::copysign(libm::pow(libm::fabs(*v), alpha), *v);
    }
    let norm = libm::sqrt(fv.values.iter().map(|v| v * v).sum::<f64>());
    if norm > 0.0 {
        fv.values.iter_mut().for_each(|v| *v /= norm);
    }
    fv.normalized = true;
    fv
}

/// Encodes and normalizes in one go.
pub fn encode_normalized(gmm: &DiagGmm, x: &Matrix, alpha: f64) -> Result<FisherVector, FisherError> {
    Ok(normalize(encode(gmm, x)?, alpha))
}
