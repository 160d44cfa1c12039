//! Named-tensor checkpoint container.
//!
//! ```text
//! magic "TPVW" | version u32 | count u32
//! per entry: name_len u32 | name (utf-8) | dtype u8 (0 = f32, 1 = f64)
//!            | rank u32 | dims u64 × rank | payload (little-endian)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, FormatError, Result};
use crate::io::Reader;

const MAGIC: [u8; 4] = *b"TPVW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>, dtype: Dtype) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec())
            .map_err(|_| FormatError::Header("tensor name is not utf-8".into()))?;
        let dtype = match r.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(FormatError::Header(format!("unknown dtype tag {other}"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Header(format!("shape {shape:?} overflows")))?;
        let payload = r.bytes(n.checked_mul(dtype.size()).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available: r.remaining(),
        })?)?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { field: "tensor", index: i });
        }
        out.push(NamedTensor {
            name,
            dtype,
            tensor: Tensor::new(shape, data).expect("length checked"),
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: Dtype,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(entries, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
