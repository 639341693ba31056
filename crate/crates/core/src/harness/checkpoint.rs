//! Flat binary parameter container: magic `EFK1`, then per parameter the
//! name length (u32 LE), UTF-8 name, rank (u32), dims (u32 each) and the
//! values as little-endian 32-bit floats.

use std::path::Path;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EFK1";

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len() as u64,
            message: format!("truncated {what} starting at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing EFK1 magic".into(),
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?).map_err(|e| Error::Format {
            offset: start as u64 + 4,
            message: format!("parameter name is not UTF-8: {e}"),
        })?;
        let rank_at = cur.pos;
        let rank = cur.u32("rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::Format {
                offset: rank_at as u64,
                message: format!("implausible rank {rank} for `{name}`"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dims")?);
        }
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        let raw = cur.take(count.saturating_mul(4), "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format {
            offset: rank_at as u64,
            message: e.to_string(),
        })?;
        store.add(name, t).map_err(|e| Error::Format {
            offset: start as u64,
            message: e.to_string(),
        })?;
    }
    Ok(store)
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
