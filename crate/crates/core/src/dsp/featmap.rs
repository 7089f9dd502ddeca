use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MFCM_MAGIC: &[u8; 4] = b"MFCM";
pub const MFCM_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// A `(p, t)` MFCC map: row = coefficient, column = frame, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    p: usize,
    t: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(p: usize, t: usize, values: Vec<f32>) -> Result<Self> {
        if p == 0 || t == 0 {
            return Err(Error::Shape(format!("feature map must be non-empty, got ({p}, {t})")));
        }
        if values.len() != p * t {
            return Err(Error::Shape(format!(
                "feature map ({p}, {t}) needs {} values, got {}",
                p * t,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "feature map value at ({}, {}) is not finite",
                i / t,
                i % t
            )));
        }
        Ok(FeatureMap { p, t, values })
    }

    pub fn zeros(p: usize, t: usize) -> Self {
        FeatureMap {
            p,
            t,
            values: vec![0.0; p * t],
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.t + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.t + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.t..(row + 1) * self.t]
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.p).map(|r| self.get(r, col)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MFCM_MAGIC);
        out.extend_from_slice(&MFCM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.p as u32).to_le_bytes());
        out.extend_from_slice(&(self.t as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Schema(format!(
                "feature map file is {} bytes, shorter than its header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MFCM_MAGIC {
            return Err(Error::Schema("missing MFCM magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != MFCM_VERSION {
            return Err(Error::Schema(format!("unsupported MFCM version {version}")));
        }
        let (p, t) = (word(8) as usize, word(12) as usize);
        let expected = p
            .checked_mul(t)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::Schema(format!(
                "MFCM ({p}, {t}) expects {} bytes, file has {}",
                expected.map_or("overflowing".to_string(), |n| n.to_string()),
                bytes.len()
            )));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMap::new(p, t, values)
    }
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}
