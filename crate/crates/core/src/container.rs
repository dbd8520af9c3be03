//! Versioned binary container for named `f64` arrays.
//!
//! ```text
//! magic "VWORMHL\0" | u32 format version | u32 header length | header (JSON)
//! u32 array count | per array: u32 name length, name, u32 rank, u64 dims.., f64 data..
//! ```
//! All integers and reals are little-endian. Saving then loading is bitwise exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VWORMHL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(header: Value) -> Self {
        Container {
            header,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: origin.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = read_u32(&mut r).ok_or_else(|| bad("truncated header length"))? as usize;
        let header_bytes = take(&mut r, hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Value = serde_json::from_slice(header_bytes)?;
        let count = read_u32(&mut r).ok_or_else(|| bad("truncated array count"))?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = read_u32(&mut r).ok_or_else(|| bad("truncated name length"))? as usize;
            let name = take(&mut r, nlen).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not utf-8"))?;
            let rank = read_u32(&mut r).ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let raw = take(&mut r, 8).ok_or_else(|| bad("truncated dims"))?;
                shape.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8).ok_or_else(|| bad("truncated data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
            arrays.push((name, t));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Container::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    take(r, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if r.len() < n {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Some(head)
}
