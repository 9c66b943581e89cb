//! The `UWM1` binary tensor container.
//!
//! A file holds a sequence of named tensors. Each record is
//!
//! ```text
//! u32    name length (little-endian)
//! [u8]   name, UTF-8
//! [u8;4] magic "UWM1"
//! u8     dtype code: 0 = little-endian f32, 1 = little-endian i32
//! u8     rank
//! [u32]  rank dims, little-endian
//! [u8]   payload, row-major, little-endian
//! ```
//!
//! Readers report the byte offset of the first inconsistency so corrupt
//! or truncated files are diagnosable.

use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"UWM1";
const DTYPE_F32: u8 = 0;
const DTYPE_I32: u8 = 1;
const MAX_NAME: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
}

/// One tensor's raw contents.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    I32 { dims: Vec<usize>, data: Vec<i32> },
}

impl TensorData {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F32 { dims, .. } => dims,
            TensorData::I32 { dims, .. } => dims,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32 { data, .. } => data.len(),
            TensorData::I32 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            TensorData::F32 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match self {
            TensorData::I32 { data, .. } => Some(data),
            _ => None,
        }
    }

    /// Exact encoding of an `f64` matrix: each value becomes two i32
    /// words (low, high) of its bit pattern. The container only has f32
    /// and i32 dtypes, so this is how checkpoints keep full precision.
    pub fn from_f64_exact(rows: usize, cols: usize, values: &[f64]) -> TensorData {
        assert_eq!(values.len(), rows * cols);
        let mut data = Vec::with_capacity(values.len() * 2);
        for v in values {
            let bits = v.to_bits();
            data.push((bits & 0xffff_ffff) as u32 as i32);
            data.push((bits >> 32) as u32 as i32);
        }
        TensorData::I32 {
            dims: vec![rows, cols, 2],
            data,
        }
    }

    /// Inverse of [`TensorData::from_f64_exact`].
    pub fn to_f64_exact(&self) -> Option<(usize, usize, Vec<f64>)> {
        let TensorData::I32 { dims, data } = self else {
            return None;
        };
        if dims.len() != 3 || dims[2] != 2 || data.len() != dims[0] * dims[1] * 2 {
            return None;
        }
        let values = data
            .chunks_exact(2)
            .map(|w| {
                let lo = w[0] as u32 as u64;
                let hi = w[1] as u32 as u64;
                f64::from_bits(lo | (hi << 32))
            })
            .collect();
        Some((dims[0], dims[1], values))
    }

    pub fn from_mat_f64_exact(m: &Array2<f64>) -> TensorData {
        let (r, c) = m.dim();
        TensorData::from_f64_exact(r, c, m.as_slice().expect("contiguous"))
    }

    pub fn to_mat_f64_exact(&self) -> Option<Array2<f64>> {
        let (r, c, v) = self.to_f64_exact()?;
        Array2::from_shape_vec((r, c), v).ok()
    }
}

fn payload_bytes(t: &TensorData) -> usize {
    t.len() * 4
}

/// Serialize records into a byte vector in the given order.
pub fn encode_tensors(entries: &[(String, TensorData)]) -> Vec<u8> {
    let total: usize = entries
        .iter()
        .map(|(n, t)| 4 + n.len() + 4 + 1 + 1 + 4 * t.dims().len() + payload_bytes(t))
        .sum();
    let mut out = Vec::with_capacity(total);
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&MAGIC);
        match t {
            TensorData::F32 { dims, data } => {
                out.push(DTYPE_F32);
                out.push(dims.len() as u8);
                for d in dims {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorData::I32 { dims, data } => {
                out.push(DTYPE_I32);
                out.push(dims.len() as u8);
                for d in dims {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_tensors(path: &Path, entries: &[(String, TensorData)]) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_tensors(entries))?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ContainerError> {
        Err(ContainerError::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.buf.len() {
            return self.err(format!(
                "truncated: need {n} bytes for {what}, {} remain",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse every record from a byte buffer.
pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, TensorData)>, ContainerError> {
    let mut c = Cursor { buf, pos: 0 };
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let name_len = c.u32("name length")?;
        if name_len > MAX_NAME {
            return c.err(format!("name length {name_len} exceeds limit"));
        }
        let name_bytes = c.take(name_len as usize, "name")?;
        let name = match std::str::from_utf8(name_bytes) {
            Ok(s) => s.to_string(),
            Err(_) => return c.err("name is not valid UTF-8"),
        };
        let magic_at = c.pos;
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(ContainerError::Format {
                offset: magic_at as u64,
                message: format!("bad magic {magic:02x?}, expected \"UWM1\""),
            });
        }
        let dtype = c.take(1, "dtype")?[0];
        let rank = c.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dim")? as usize);
        }
        let count: usize = dims.iter().product();
        if count > (1 << 31) {
            return c.err(format!("tensor {name:?} element count {count} exceeds limit"));
        }
        let payload = c.take(count * 4, "payload")?;
        let t = match dtype {
            DTYPE_F32 => TensorData::F32 {
                dims,
                data: payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            },
            DTYPE_I32 => TensorData::I32 {
                dims,
                data: payload
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            },
            other => {
                return Err(ContainerError::Format {
                    offset: (magic_at + 4) as u64,
                    message: format!("unknown dtype code {other}"),
                })
            }
        };
        out.push((name, t));
    }
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, TensorData)>, ContainerError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_tensors(&buf)
}

/// Lookup helper over a decoded record list.
pub fn find<'a>(entries: &'a [(String, TensorData)], name: &str) -> Option<&'a TensorData> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}
