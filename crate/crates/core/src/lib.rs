//! Orderless Fisher Vector encoding of multi-stage attention features.
//!
//! This crate holds the numerical core and is `no_std` (it needs `alloc`).
//! File formats, manifests, the pipeline driver and the command line live in
//! the `fvstage` companion crate.
//!
//! The pieces, bottom-up:
//!
//! * [`matrix`]: a small row-major `f64` matrix used everywhere.
//! * [`entropy`]: brightness-histogram entropy and entropy ranking.
//! * [`attention`] / [`backbone`]: softmax and ReLU linear attention, and a
//!   seeded multi-stage toy feature extractor.
//! * [`stagecat`]: lossless GCD split/merge of tokens across stages.
//! * [`gmm`]: diagonal Gaussian mixtures fitted by EM.
//! * [`fisher`]: Fisher Vector encoding and power/L2 normalization.
//! * [`kl`]: Monte-Carlo KL divergence between mixtures.
//! * [`classifier`]: a two-layer head trained with Adam.
//! * [`metrics`]: ACC, AUC (binary, one-vs-rest, multilabel) and ROC points.
//! * [`synth`] / [`study`]: synthetic data and the subsampling study.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod backbone;
pub mod classifier;
pub mod entropy;
pub mod fisher;
pub mod gmm;
pub mod image;
pub mod kl;
pub mod matrix;
pub mod metrics;
pub mod rng;
pub mod stagecat;
pub mod study;
pub mod synth;

pub use fisher::FisherVector;
pub use gmm::DiagGmm;
pub use image::GrayImage;
pub use matrix::Matrix;
