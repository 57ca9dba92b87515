//! Model checkpoints.
//!
//! Layout (little-endian): `"SAEM"` | version `u32` | count `u32` | then per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, extents `u32 × rank`,
//! `f32` payload.

use std::path::Path;

use crate::codec::{self, put_f32s, put_u32, to_u32, Reader};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every tensor of `store` in insertion order.
pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, to_u32(store.len(), "tensor count")?);
    for (_, e) in store.iter() {
        put_u32(&mut out, to_u32(e.name.len(), "name length")?);
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, to_u32(e.value.rank(), "rank")?);
        for &d in e.value.shape() {
            put_u32(&mut out, to_u32(d, "extent")?);
        }
        put_f32s(&mut out, e.value.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.error(at + 4, "name is not UTF-8"))?
            .to_string();
        let at = r.pos();
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(r.error(at, format!("tensor '{name}' has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let at = r.pos();
            let d = r.u32("extent")? as usize;
            if d == 0 {
                return Err(r.error(at, format!("tensor '{name}' has a zero extent")));
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.error(at, "tensor size overflows"))?;
        let data = r.f32s(n, "payload")?;
        out.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    codec::write_file(path, &encode_checkpoint(store)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&codec::read_file(path)?, path)
}
