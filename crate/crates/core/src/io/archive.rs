//! Binary archive of a config text plus named `f64` arrays.
//!
//! Layout (little-endian): magic `DBDCKPT1`, `u32` config length, config
//! UTF-8 bytes, `u32` array count, then per array `u32` name length, name,
//! `u32` rank, `u64` dims, and the `f64` data.

use std::collections::BTreeMap;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"DBDCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub config: String,
    pub arrays: BTreeMap<String, Tensor>,
}

pub fn encode(archive: &Archive) -> Vec<u8> {
    let payload: usize = archive.arrays.values().map(|t| t.numel() * 8 + 64).sum();
    let mut out = Vec::with_capacity(payload + archive.config.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(archive.config.len() as u32).to_le_bytes());
    out.extend_from_slice(archive.config.as_bytes());
    out.extend_from_slice(&(archive.arrays.len() as u32).to_le_bytes());
    for (name, t) in &archive.arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Archive, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let config = r.string()?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if !(1..=4).contains(&rank) {
            return Err(format!("array `{name}` has rank {rank}"));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            dims[4 - rank + i] = r.u64()?;
        }
        let shape = Shape::from_dims(dims);
        let raw = r.take(shape.numel().checked_mul(8).ok_or("array too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| e.to_string())?;
        arrays.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Archive { config, arrays })
}

pub fn write(path: &Path, archive: &Archive) -> Result<()> {
    write_atomic(path, &encode(archive))
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
