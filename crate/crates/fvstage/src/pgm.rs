//! Binary PGM (P5) images.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fvstage_core::GrayImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unsupported format {0:?}; only binary P5 is read")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(&'static str),
    #[error("pixel data: expected {expected} bytes, found {found}")]
    ShortData { expected: usize, found: usize },
}

/// Reads the next whitespace-separated header token, skipping comments.
fn token(buf: &[u8], at: &mut usize) -> Option<String> {
    loop {
        while *at < buf.len() && buf[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if *at < buf.len() && buf[*at] == b'#' {
            while *at < buf.len() && buf[*at] != b'\n' {
                *at += 1;
            }
            continue;
        }
        break;
    }
    let start = *at;
    while *at < buf.len() && !buf[*at].is_ascii_whitespace() && buf[*at] != b'#' {
        *at += 1;
    }
    (start < *at).then(|| String::from_utf8_lossy(&buf[start..*at]).into_owned())
}

fn number(buf: &[u8], at: &mut usize, what: &'static str) -> Result<usize, PgmError> {
    token(buf, at)
        .and_then(|t| t.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or(PgmError::CorruptHeader(what))
}

/// Parses a P5 image, scaling samples to `[0, 1]` by the maxval.
pub fn decode(buf: &[u8]) -> Result<GrayImage, PgmError> {
    let mut at = 0;
    let magic = token(buf, &mut at).ok_or(PgmError::CorruptHeader("missing magic"))?;
    if magic != "P5" {
        return Err(PgmError::UnsupportedFormat(magic));
    }
    let width = number(buf, &mut at, "width")?;
    let height = number(buf, &mut at, "height")?;
    let maxval = number(buf, &mut at, "maxval")?;
    if maxval > 65535 {
        return Err(PgmError::CorruptHeader("maxval above 65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    if at >= buf.len() || !buf[at].is_ascii_whitespace() {
        return Err(PgmError::CorruptHeader("missing raster separator"));
    }
    at += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * bpp;
    let raster = &buf[at..];
    if raster.len() < expected {
        return Err(PgmError::ShortData { expected, found: raster.len() });
    }
    let scale = maxval as f64;
    let pixels = raster[..expected]
        .chunks_exact(bpp)
        .map(|c| {
            let v = if bpp == 1 { c[0] as u16 } else { u16::from_be_bytes([c[0], c[1]]) };
            (v as f64 / scale).min(1.0)
        })
        .collect();
    GrayImage::new(width, height, pixels).map_err(|_| PgmError::CorruptHeader("image size"))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    decode(&fs::read(path).map_err(|source| PgmError::Io { path: path.to_path_buf(), source })?)
}

/// Encodes a 2D image with maxval 255, clamping brightness to `[0, 1]`.
pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), PgmError> {
    fs::write(path, encode(img)).map_err(|source| PgmError::Io { path: path.to_path_buf(), source })
}
