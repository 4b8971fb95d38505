//! Seeded multi-stage toy feature extractor.
//!
//! Each stage cuts the image into non-overlapping square (or cubic) patches,
//! embeds every flattened patch with a fixed random matrix and runs one
//! residual attention block over the resulting tokens. There is no positional
//! encoding, so the token set only describes local appearance.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError, AttentionKind, AttentionParams};
use crate::image::GrayImage;
use crate::matrix::Matrix;
use crate::rng;
use crate::stagecat::gcd_all;

/// Index given to the deepest configured stage.
pub const LAST_STAGE_INDEX: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackboneError {
    #[error("image extent {extent} is not divisible by patch size {patch}")]
    IndivisibleImage { extent: usize, patch: usize },
    #[error("invalid backbone config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Stages from shallowest to deepest.
    pub stages: Vec<StageConfig>,
    pub seed: u64,
    pub attention: AttentionKind,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    attention::DEFAULT_EPS
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: alloc::vec![
                StageConfig { patch: 4, dim: 96 },
                StageConfig { patch: 7, dim: 192 },
            ],
            seed: 0,
            attention: AttentionKind::ReluLinear,
            eps: attention::DEFAULT_EPS,
        }
    }
}

impl BackboneConfig {
    /// Keeps only the deepest `n` stages.
    pub fn last_stages(&self, n: usize) -> Result<Self, BackboneError> {
        if n == 0 || n > self.stages.len() {
            return Err(BackboneError::BadConfig("stage count out of range"));
        }
        let mut c = self.clone();
        c.stages = self.stages[self.stages.len() - n..].to_vec();
        Ok(c)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim).collect()
    }

    fn validate(&self) -> Result<(), BackboneError> {
        if self.stages.is_empty() {
            return Err(BackboneError::BadConfig("no stages"));
        }
        if self.stages.len() > LAST_STAGE_INDEX {
            return Err(BackboneError::BadConfig("at most four stages"));
        }
        if self.stages.iter().any(|s| s.patch == 0 || s.dim == 0) {
            return Err(BackboneError::BadConfig("patch sizes and dims must be positive"));
        }
        if gcd_all(&self.dims()) <= 1 {
            return Err(BackboneError::BadConfig("stage dims need a common divisor > 1"));
        }
        if !(self.eps > 0.0) {
            return Err(BackboneError::BadConfig("eps must be positive"));
        }
        Ok(())
    }
}

/// Tokens produced by one backbone stage for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFeatures {
    pub stage_index: usize,
    pub tokens: Matrix,
}

impl StageFeatures {
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }
}

#[derive(Debug, Clone)]
struct StageWeights {
    index: usize,
    patch: usize,
    embed: Matrix,
    attn: AttentionParams,
}

/// A backbone with its weights drawn from the config seed. Embedding shapes
/// depend on the patch volume, hence separate 2D and 3D constructors.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<StageWeights>,
    volumetric: bool,
}

impl Backbone {
    pub fn new(config: &BackboneConfig) -> Result<Self, BackboneError> {
        Self::build(config, false)
    }

    /// Backbone for 3D volumes: patches are `p x p x p` cubes.
    pub fn for_volume(config: &BackboneConfig) -> Result<Self, BackboneError> {
        Self::build(config, true)
    }

    fn build(config: &BackboneConfig, volumetric: bool) -> Result<Self, BackboneError> {
        config.validate()?;
        let first = LAST_STAGE_INDEX + 1 - config.stages.len();
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let index = first + i;
                let mut seeds = rng::seeded_stream(config.seed, index as u64);
                let (embed_seed, attn_seed): (u64, u64) = (seeds.random(), seeds.random());
                let fan_in = if volumetric { s.patch.pow(3) } else { s.patch * s.patch };
                let mut r = rng::seeded(embed_seed);
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                let embed = Matrix::from_fn(fan_in, s.dim, |_, _| rng::uniform_sym(&mut r, bound));
                StageWeights {
                    index,
                    patch: s.patch,
                    embed,
                    attn: AttentionParams::random(s.dim, s.dim, attn_seed),
                }
            })
            .collect();
        Ok(Self { config: config.clone(), stages, volumetric })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs every stage on `image`, shallowest first.
    pub fn extract(&self, image: &GrayImage) -> Result<Vec<StageFeatures>, BackboneError> {
        if image.depth().is_some() != self.volumetric {
            return Err(BackboneError::BadConfig("image dimensionality does not match backbone"));
        }
        self.stages
            .iter()
            .map(|s| {
                let patches = patchify(image, s.patch)?;
                let e = patches.matmul(&s.embed);
                let a = attention::attend(&e, &s.attn, self.config.attention, self.config.eps)?;
                let mut tokens = e;
                for (t, v) in tokens.as_mut_slice().iter_mut().zip(a.as_slice()) {
                    *t += v;
                }
                Ok(StageFeatures { stage_index: s.index, tokens })
            })
            .collect()
    }
}

/// Convenience wrapper: builds the backbone matching the image and extracts.
pub fn extract_stages(
    image: &GrayImage,
    config: &BackboneConfig,
) -> Result<Vec<StageFeatures>, BackboneError> {
    let b = if image.depth().is_some() { Backbone::for_volume(config)? } else { Backbone::new(config)? };
    b.extract(image)
}

/// Flattens non-overlapping patches into rows, patches in raster order.
pub fn patchify(image: &GrayImage, patch: usize) -> Result<Matrix, BackboneError> {
    let (w, h) = (image.width(), image.height());
    let depth = image.depth();
    for extent in [w, h].into_iter().chain(depth) {
        if extent % patch != 0 {
            return Err(BackboneError::IndivisibleImage { extent, patch });
        }
    }
    let pd = if depth.is_some() { patch } else { 1 };
    let nz = depth.unwrap_or(1) / pd;
    let (ny, nx) = (h / patch, w / patch);
    let len = patch * patch * pd;
    let mut data = Vec::with_capacity(nz * ny * nx * len);
    for bz in 0..nz {
        for by in 0..ny {
            for bx in 0..nx {
                for z in 0..pd {
                    for y in 0..patch {
                        for x in 0..patch {
                            data.push(image.at(bx * patch + x, by * patch + y, bz * pd + z));
                        }
                    }
                }
            }
        }
    }
    Ok(Matrix::from_vec(nz * ny * nx, len, data).expect("patch arithmetic"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap()
    }

    #[test]
    fn token_counts_follow_patch_arithmetic() {
        let f = extract_stages(&ramp(28, 28), &BackboneConfig::default()).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!((f[0].token_count(), f[0].dim()), (49, 96));
        assert_eq!((f[1].token_count(), f[1].dim()), (16, 192));
        assert_eq!((f[0].stage_index, f[1].stage_index), (3, 4));
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = BackboneConfig::default();
        let a = extract_stages(&ramp(28, 28), &cfg).unwrap();
        let b = extract_stages(&ramp(28, 28), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_image_rejected() {
        let cfg = BackboneConfig {
            stages: vec![StageConfig { patch: 7, dim: 8 }],
            ..BackboneConfig::default()
        };
        assert_eq!(
            extract_stages(&ramp(30, 30), &cfg),
            Err(BackboneError::IndivisibleImage { extent: 30, patch: 7 })
        );
    }

    #[test]
    fn coprime_dims_rejected() {
        let cfg = BackboneConfig {
            stages: vec![StageConfig { patch: 2, dim: 3 }, StageConfig { patch: 4, dim: 4 }],
            ..BackboneConfig::default()
        };
        assert!(matches!(Backbone::new(&cfg), Err(BackboneError::BadConfig(_))));
    }

    #[test]
    fn volumes_use_cubic_patches() {
        let vol = GrayImage::volume(4, 4, 4, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let cfg = BackboneConfig {
            stages: vec![StageConfig { patch: 2, dim: 6 }],
            ..BackboneConfig::default()
        };
        let f = extract_stages(&vol, &cfg).unwrap();
        assert_eq!((f[0].token_count(), f[0].dim()), (8, 6));
    }

    #[test]
    fn last_stages_keeps_the_deepest() {
        let cfg = BackboneConfig {
            stages: vec![
                StageConfig { patch: 4, dim: 96 },
                StageConfig { patch: 7, dim: 192 },
                StageConfig { patch: 14, dim: 384 },
            ],
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.last_stages(1).unwrap().dims(), vec![384]);
        assert_eq!(cfg.last_stages(2).unwrap().dims(), vec![192, 384]);
        assert!(cfg.last_stages(4).is_err());
    }
}
