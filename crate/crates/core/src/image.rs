//! Grayscale images and volumes.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image has zero extent")]
    Empty,
    #[error("pixel count {found} does not match {width}x{height}x{depth}")]
    PixelCount { width: usize, height: usize, depth: usize, found: usize },
    #[error("non-finite brightness at pixel {0}")]
    NonFinite(usize),
}

/// Brightness values of a 2D image (`depth == None`) or a 3D volume, stored
/// row-major with the slice index outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    depth: Option<usize>,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        Self::build(width, height, None, pixels)
    }

    pub fn volume(
        width: usize,
        height: usize,
        depth: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, ImageError> {
        Self::build(width, height, Some(depth), pixels)
    }

    fn build(
        width: usize,
        height: usize,
        depth: Option<usize>,
        pixels: Vec<f64>,
    ) -> Result<Self, ImageError> {
        let d = depth.unwrap_or(1);
        if width == 0 || height == 0 || d == 0 {
            return Err(ImageError::Empty);
        }
        if pixels.len() != width * height * d {
            return Err(ImageError::PixelCount { width, height, depth: d, found: pixels.len() });
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { width, height, depth, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> Option<usize> {
        self.depth
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Brightness at `(x, y, z)`; `z` must be 0 for 2D images.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.pixels[(z * self.height + y) * self.width + x]
    }
}
