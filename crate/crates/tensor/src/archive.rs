//! `DTN1` named-tensor archive.
//!
//! Layout: the 4-byte magic `DTN1`, then records until end of file. Each
//! record is a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u32` dimensions, a dtype byte (0 = f32, 1 = f64) and the values in
//! little-endian order. All integers are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"DTN1";

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(t.dtype().tag());
        match t.dtype() {
            DType::F32 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::Archive(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(TensorError::Archive("missing DTN1 magic".into()));
    }
    let mut r = Reader { buf, pos: 4 };
    let mut entries = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| TensorError::Archive(format!("entry name at byte {} is not UTF-8", r.pos)))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| TensorError::Archive(format!("entry `{name}` has unknown dtype tag {tag}")))?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.size_of(), "values")?;
        let data: Vec<f64> = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::with_dtype(&shape, data, dtype)
            .map_err(|e| TensorError::Archive(format!("entry `{name}`: {e}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Hex SHA-256 of the archive encoding; equal iff names, shapes, dtypes and
/// values are bit-identical and in the same order.
pub fn content_hash(entries: &[(String, Tensor)]) -> String {
    hex::encode(Sha256::digest(encode(entries)))
}
