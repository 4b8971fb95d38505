//! The `FVT1` tensor format and multi-tensor bundles.
//!
//! Layout (little-endian): `b"FVT1"`, dtype byte (0 = f32, 1 = f64), ndim
//! byte, two zero bytes, `ndim` u64 dims, then the row-major payload.
//! Values are always held as f64 in memory.
//!
//! A bundle is several `FVT1` tensors written back to back, with a JSON
//! sidecar at `<path>.json` naming them and carrying free-form metadata.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fvstage_core::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FVT1";
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic {found:?} at byte {offset}")]
    BadMagic { offset: usize, found: [u8; 4] },
    #[error("unsupported dtype code {code} at byte {offset}")]
    UnsupportedDtype { offset: usize, code: u8 },
    #[error("malformed header at byte {offset}: {reason}")]
    BadHeader { offset: usize, reason: &'static str },
    #[error("truncated payload at byte {offset}: need {needed} bytes, {available} available")]
    TruncatedPayload { offset: usize, needed: usize, available: usize },
    #[error("non-finite value at byte {offset}")]
    NonFiniteValue { offset: usize },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("shape error: {0}")]
    Shape(&'static str),
    #[error("bundle {path}: {reason}")]
    Bundle { path: PathBuf, reason: String },
}

/// A dense row-major tensor of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(TensorError::Shape("rank must be 1..=255"));
        }
        if dims.contains(&0) {
            return Err(TensorError::Shape("dims must be positive"));
        }
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if count != Some(data.len()) {
            return Err(TensorError::Shape("product of dims differs from data length"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Shape("non-finite value"));
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self, TensorError> {
        Self::new(vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// 2D tensors map directly; 1D tensors become a single row.
    pub fn into_matrix(self) -> Result<Matrix, TensorError> {
        let (r, c) = match self.dims[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return Err(TensorError::Shape("expected a 1D or 2D tensor")),
        };
        Matrix::from_vec(r, c, self.data).map_err(|_| TensorError::Shape("matrix shape"))
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>, TensorError> {
    let mut out = Vec::with_capacity(HEADER_FIXED + 8 * t.dims.len() + dtype.width() * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[dtype.code(), t.dims.len() as u8, 0, 0]);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(TensorError::NonFiniteValue { offset: out.len() });
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take(buf: &[u8], at: usize, n: usize) -> Result<&[u8], TensorError> {
    buf.get(at..at + n)
        .ok_or(TensorError::TruncatedPayload { offset: at, needed: n, available: buf.len().saturating_sub(at) })
}

/// Decodes one tensor starting at `start`; returns it with the offset just
/// past its payload. Offsets in errors are absolute within `buf`.
pub fn decode_at(buf: &[u8], start: usize) -> Result<(Tensor, usize), TensorError> {
    let head = take(buf, start, HEADER_FIXED)?;
    if &head[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&head[..4]);
        return Err(TensorError::BadMagic { offset: start, found });
    }
    let dtype = match head[4] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        code => return Err(TensorError::UnsupportedDtype { offset: start + 4, code }),
    };
    let ndim = head[5] as usize;
    if ndim == 0 {
        return Err(TensorError::BadHeader { offset: start + 5, reason: "zero rank" });
    }
    if head[6] != 0 || head[7] != 0 {
        return Err(TensorError::BadHeader { offset: start + 6, reason: "reserved bytes must be zero" });
    }
    let mut at = start + HEADER_FIXED;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = u64::from_le_bytes(take(buf, at, 8)?.try_into().expect("8 bytes"));
        if raw == 0 {
            return Err(TensorError::BadHeader { offset: at, reason: "zero dimension" });
        }
        let d = usize::try_from(raw).map_err(|_| TensorError::BadHeader { offset: at, reason: "dimension too large" })?;
        dims.push(d);
        at += 8;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|c| c.checked_mul(dtype.width()).map(|_| c))
        .ok_or(TensorError::BadHeader { offset: start + HEADER_FIXED, reason: "element count overflows" })?;
    let payload = take(buf, at, count * dtype.width())?;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(dtype.width()).enumerate() {
        let v = match dtype {
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
        };
        if !v.is_finite() {
            return Err(TensorError::NonFiniteValue { offset: at + i * dtype.width() });
        }
        data.push(v);
    }
    at += payload.len();
    Ok((Tensor { dims, data }, at))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(buf: &[u8]) -> Result<Tensor, TensorError> {
    let (t, end) = decode_at(buf, 0)?;
    if end != buf.len() {
        return Err(TensorError::TrailingBytes(buf.len() - end));
    }
    Ok(t)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorError + '_ {
    move |source| TensorError::Io { path: path.to_path_buf(), source }
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<(), TensorError> {
    fs::write(path, encode(t, dtype)?).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar<M> {
    tensors: Vec<String>,
    meta: M,
}

/// Named tensors plus metadata, stored as one `FVT1` stream and a sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle<M> {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: M,
}

impl<M> Bundle<M> {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor, TensorError> {
        let i = self.tensors.iter().position(|(n, _)| n == name).ok_or_else(|| TensorError::Bundle {
            path: PathBuf::new(),
            reason: format!("missing tensor {name:?}"),
        })?;
        Ok(self.tensors.remove(i).1)
    }
}

pub fn write_bundle<M: Serialize>(path: &Path, bundle: &Bundle<M>) -> Result<(), TensorError> {
    let mut bytes = Vec::new();
    for (_, t) in &bundle.tensors {
        bytes.extend(encode(t, Dtype::F64)?);
    }
    let side = Sidecar { tensors: bundle.tensors.iter().map(|(n, _)| n.clone()).collect(), meta: &bundle.meta };
    let json = serde_json::to_vec_pretty(&side)
        .map_err(|e| TensorError::Bundle { path: path.to_path_buf(), reason: e.to_string() })?;
    fs::write(path, bytes).map_err(io_err(path))?;
    let side_path = sidecar_path(path);
    fs::write(&side_path, json).map_err(io_err(&side_path))
}

pub fn read_bundle<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<Bundle<M>, TensorError> {
    let side_path = sidecar_path(path);
    let side: Sidecar<M> = serde_json::from_slice(&fs::read(&side_path).map_err(io_err(&side_path))?)
        .map_err(|e| TensorError::Bundle { path: side_path.clone(), reason: e.to_string() })?;
    let buf = fs::read(path).map_err(io_err(path))?;
    let mut at = 0;
    let mut tensors = Vec::with_capacity(side.tensors.len());
    for name in side.tensors {
        let (t, next) = decode_at(&buf, at)?;
        tensors.push((name, t));
        at = next;
    }
    if at != buf.len() {
        return Err(TensorError::TrailingBytes(buf.len() - at));
    }
    Ok(Bundle { tensors, meta: side.meta })
}
