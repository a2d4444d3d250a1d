//! GZTN container: `"GZTN"`, version 1, dtype 1 (f32 LE), ndim, `ndim` u64 LE
//! dims, row-major payload. Files may hold several records back to back.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GZTN";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(value: f32) -> Self {
        Self { dims: Vec::new(), data: vec![value] }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let &[r, c] = self.dims.as_slice() else {
            return Err(Error::DimensionMismatch(format!("expected a 2-d tensor, got dims {:?}", self.dims)));
        };
        Ok(Array2::from_shape_vec((r, c), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("dims checked on construction"))
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::DimensionMismatch(format!("expected a 1-d tensor, got dims {:?}", self.dims)));
        }
        Ok(self.data.iter().map(|&v| f64::from(v)).collect())
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::DimensionMismatch(format!("tensor dims {dims:?} overflow")))
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, t.dims.len() as u8]);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    bytes.get(at..at + len).ok_or(Error::Truncated {
        expected: at + len,
        found: bytes.len(),
    })
}

/// Decodes one record from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            Error::Truncated { expected: 4, found: bytes.len() }
        } else {
            Error::BadMagic
        });
    }
    let head = take(bytes, 4, 3)?;
    if head[0] != VERSION {
        return Err(Error::UnsupportedVersion(head[0]));
    }
    if head[1] != DTYPE_F32 {
        return Err(Error::DtypeMismatch(head[1]));
    }
    let ndim = head[2] as usize;
    let mut at = 7;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = u64::from_le_bytes(take(bytes, at, 8)?.try_into().expect("8 bytes"));
        dims.push(usize::try_from(raw).map_err(|_| Error::DimensionMismatch(format!("dimension {raw} too large")))?);
        at += 8;
    }
    let count = element_count(&dims)?;
    let payload = take(bytes, at, 4 * count)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor { dims, data }, at + 4 * count))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensors(path, std::slice::from_ref(t))
}

pub fn write_tensors(path: impl AsRef<Path>, ts: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for t in ts {
        encode_tensor(t, &mut out);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a single-record file; extra bytes are an error.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::TrailingData(bytes.len() - used));
    }
    Ok(t)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (t, used) = decode_tensor(&bytes[at..])?;
        out.push(t);
        at += used;
    }
    Ok(out)
}
