//! Binary parameter checkpoints.
//!
//! Layout: the 10-byte magic `GDMRGCKPT1`, then for each parameter in name
//! order: `u32` path length, UTF-8 path, `u32` rank, `rank × u64` dims,
//! `numel × f64` values. All integers and floats are little-endian. The file
//! ends after the last parameter.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 10] = b"GDMRGCKPT1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NumError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into `(path, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NumError::Checkpoint("bad magic, expected GDMRGCKPT1".into()));
    }
    let mut c = Cursor { buf: bytes, pos: MAGIC.len() };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32("path length")? as usize;
        let name = std::str::from_utf8(c.take(len, "path")?)
            .map_err(|e| NumError::Checkpoint(format!("path is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| NumError::Checkpoint("size overflow".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

/// Overwrites the values of `store` from a checkpoint. Every stored
/// parameter must be present with a matching shape, and no extras allowed.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let entries = decode(&bytes)?;
    if entries.len() != store.len() {
        return Err(NumError::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store.set_value(&name, t)?;
    }
    Ok(())
}
