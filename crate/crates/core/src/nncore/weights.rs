//! The `FCNW` weight file: named tensors with little-endian f32 payloads.
//!
//! ```text
//! "FCNW" | u32 version=1 | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u32 extents | f32 payload
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const FCNW_MAGIC: &[u8; 4] = b"FCNW";
pub const FCNW_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

/// Serializes tensors in order. Values are narrowed to f32.
pub fn encode_weights(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FCNW_MAGIC);
    out.extend_from_slice(&FCNW_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Schema(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Schema(format!("tensor {name} has rank {}", t.rank())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Schema(format!("tensor {name} extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Schema(format!(
                "weight file truncated reading {what} at byte {} (file is {} bytes)",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<NamedTensors> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != FCNW_MAGIC {
        return Err(Error::Schema("missing FCNW magic".into()));
    }
    let version = cur.u32("version")?;
    if version != FCNW_VERSION {
        return Err(Error::Schema(format!("unsupported FCNW version {version}")));
    }
    let count = cur.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| Error::Schema(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Schema(format!("tensor {name} is too large")))?;
        let payload = cur.take(numel, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Schema(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Schema(format!(
            "weight file has {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
