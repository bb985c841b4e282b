//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FFCKPT01"
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata (JSON or empty)
//! count      u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   frozen   u8 (0 or 1)
//!   ndim     u32 (always 2)
//!   dims     ndim × u64
//!   data     rows·cols × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Matrix, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FFCKPT01";

pub fn encode(params: &ParamSet, metadata: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.frozen as u8);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Decodes a checkpoint into its parameters and metadata string.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, String)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let meta_len = c.u32()? as usize;
    let metadata = c.string(meta_len)?;
    let count = c.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let frozen = match c.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b} on `{name}`"))),
        };
        if c.u32()? != 2 {
            return Err(Error::Checkpoint(format!("`{name}` is not two-dimensional")));
        }
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` dimensions overflow")))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let value = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, value, frozen);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((params, metadata))
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet, metadata: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params, metadata))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamSet, String)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
