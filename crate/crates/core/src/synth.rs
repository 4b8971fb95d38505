//! Seeded synthetic data: blob images for classification and planted
//! Gaussian mixtures for the GMM / KL studies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::DiagGmm;
use crate::image::GrayImage;
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// A Gaussian-intensity blob: `amplitude * exp(-r^2 / (2 sigma^2))` around
/// `center` (in pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobClass {
    pub center: (f64, f64),
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobImagesSpec {
    pub classes: Vec<BlobClass>,
    pub width: usize,
    pub height: usize,
    /// Images per split; classes are assigned round-robin.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Uniform center jitter, in pixels, on each axis.
    #[serde(default)]
    pub center_jitter: f64,
    /// Uniform relative jitter of the blob width.
    #[serde(default)]
    pub sigma_jitter: f64,
    #[serde(default)]
    pub background: f64,
    /// Standard deviation of additive pixel noise.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

impl BlobImagesSpec {
    /// Two classes told apart by blob size; location is jittered freely.
    pub fn two_class_default(seed: u64) -> Self {
        Self {
            classes: vec![
                BlobClass { center: (14.0, 14.0), sigma: 2.5, amplitude: 0.8 },
                BlobClass { center: (14.0, 14.0), sigma: 6.0, amplitude: 0.8 },
            ],
            width: 28,
            height: 28,
            train: 100,
            val: 20,
            test: 40,
            center_jitter: 4.0,
            sigma_jitter: 0.15,
            background: 0.1,
            noise: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.classes.is_empty() {
            return Err(SynthError::InvalidSpec("no classes"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidSpec("image size must be positive"));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(SynthError::InvalidSpec("split counts must be positive"));
        }
        if self.classes.iter().any(|c| !(c.sigma > 0.0)) {
            return Err(SynthError::InvalidSpec("blob sigma must be positive"));
        }
        if self.noise < 0.0 || self.center_jitter < 0.0 || !(0.0..1.0).contains(&self.sigma_jitter) {
            return Err(SynthError::InvalidSpec("jitter and noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample {
    pub id: String,
    pub split: SplitName,
    pub class: usize,
    pub image: GrayImage,
}

/// Generates all splits; samples are ordered train, val, test.
pub fn gen_blob_images(spec: &BlobImagesSpec) -> Result<Vec<BlobSample>, SynthError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.train + spec.val + spec.test);
    for (s, (split, count)) in SplitName::ALL.into_iter().zip([spec.train, spec.val, spec.test]).enumerate() {
        let mut r = rng::seeded_stream(spec.seed, s as u64);
        for i in 0..count {
            let class = i % spec.classes.len();
            let image = blob_image(spec, &spec.classes[class], &mut r);
            out.push(BlobSample { id: format!("{}-{:05}", split.as_str(), i), split, class, image });
        }
    }
    Ok(out)
}

fn blob_image<R: Rng>(spec: &BlobImagesSpec, c: &BlobClass, r: &mut R) -> GrayImage {
    let cx = c.center.0 + rng::uniform_sym(r, spec.center_jitter);
    let cy = c.center.1 + rng::uniform_sym(r, spec.center_jitter);
    let sigma = c.sigma * (1.0 + rng::uniform_sym(r, spec.sigma_jitter));
    let mut px = Vec::with_capacity(spec.width * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let blob = c.amplitude * libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            let noise = if spec.noise > 0.0 { spec.noise * r.sample::<f64, _>(StandardNormal) } else { 0.0 };
            px.push((spec.background + blob + noise).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(spec.width, spec.height, px).expect("validated size")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    /// Exact count per component, emitted component by component.
    PerComponent(Vec<usize>),
    /// Total count; each row picks its component from the weights.
    Total(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMixtureSpec {
    pub components: Vec<PlantedComponent>,
    pub count: SampleCount,
    pub seed: u64,
}

impl PlantedMixtureSpec {
    /// Four well-separated 2D components with unequal weights and spreads.
    pub fn four_component_2d(total: usize, seed: u64) -> Self {
        let c = |w: f64, m: [f64; 2], s: [f64; 2]| PlantedComponent { weight: w, mean: m.to_vec(), std: s.to_vec() };
        Self {
            components: vec![
                c(0.4, [0.0, 0.0], [1.0, 0.6]),
                c(0.3, [6.0, 1.0], [0.8, 1.2]),
                c(0.2, [1.0, 7.0], [1.1, 0.9]),
                c(0.1, [7.0, 7.0], [0.7, 0.7]),
            ],
            count: SampleCount::Total(total),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub x: Matrix,
    /// Component index of every row.
    pub assignment: Vec<usize>,
    pub truth: DiagGmm,
}

pub fn gen_planted_mixture(spec: &PlantedMixtureSpec) -> Result<PlantedSample, SynthError> {
    let k = spec.components.len();
    if k == 0 {
        return Err(SynthError::InvalidSpec("no components"));
    }
    let d = spec.components[0].mean.len();
    if d == 0 || spec.components.iter().any(|c| c.mean.len() != d || c.std.len() != d) {
        return Err(SynthError::InvalidSpec("component dimensions differ"));
    }
    if spec.components.iter().any(|c| c.std.iter().any(|s| !(*s > 0.0))) {
        return Err(SynthError::InvalidSpec("spreads must be positive"));
    }
    let mut r = rng::seeded(spec.seed);
    let assignment: Vec<usize> = match &spec.count {
        SampleCount::PerComponent(counts) => {
            if counts.len() != k || counts.iter().sum::<usize>() == 0 {
                return Err(SynthError::InvalidSpec("per-component counts"));
            }
            counts.iter().enumerate().flat_map(|(c, &n)| core::iter::repeat_n(c, n)).collect()
        }
        SampleCount::Total(n) => {
            if *n == 0 {
                return Err(SynthError::InvalidSpec("sample count must be positive"));
            }
            let w: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
            let pick = WeightedIndex::new(&w).map_err(|_| SynthError::InvalidSpec("weights"))?;
            (0..*n).map(|_| pick.sample(&mut r)).collect()
        }
    };
    let mut x = Matrix::zeros(assignment.len(), d);
    for (i, &c) in assignment.iter().enumerate() {
        let comp = &spec.components[c];
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = comp.mean[j] + comp.std[j] * r.sample::<f64, _>(StandardNormal);
        }
    }

    let weights: Vec<f64> = match &spec.count {
        SampleCount::PerComponent(counts) => {
            let n: usize = counts.iter().sum();
            counts.iter().map(|&c| c as f64 / n as f64).collect()
        }
        SampleCount::Total(_) => {
            let s: f64 = spec.components.iter().map(|c| c.weight).sum();
            spec.components.iter().map(|c| c.weight / s).collect()
        }
    };
    let means = Matrix::from_fn(k, d, |c, j| spec.components[c].mean[j]);
    let vars = Matrix::from_fn(k, d, |c, j| spec.components[c].std[j] * spec.components[c].std[j]);
    let truth = DiagGmm::new(weights, means, vars, 0.0).map_err(|_| SynthError::InvalidSpec("mixture parameters"))?;
    Ok(PlantedSample { x, assignment, truth })
}
