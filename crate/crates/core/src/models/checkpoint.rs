use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::layers::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTLCKPT1";

/// Serializes every parameter in registry order: magic, entry count, then
/// per entry the name, the shape and the little-endian `f64` payload.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let fail = |pos: usize, msg: String| Error::Format { offset: pos as u64, msg };
    let mut take = |n: usize, what: &str| -> Result<(&[u8], usize)> {
        if bytes.len() - pos < n {
            return Err(fail(pos, format!("truncated while reading {what}")));
        }
        let at = pos;
        pos += n;
        Ok((&bytes[at..at + n], at))
    };
    let (magic, _) = take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad magic, expected \"MTLCKPT1\"".into()));
    }
    let (raw, _) = take(8, "entry count")?;
    let count = u64::from_le_bytes(raw.try_into().unwrap());
    let mut entries = Vec::new();
    for _ in 0..count {
        let (raw, _) = take(4, "name length")?;
        let len = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        let (raw, at) = take(len, "name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| fail(at, "parameter name is not UTF-8".into()))?
            .to_string();
        let (raw, _) = take(4, "rank")?;
        let rank = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let (raw, _) = take(8, "dimension")?;
            shape.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| fail(at, format!("shape {shape:?} of {name} overflows")))?;
        let (raw, _) = take(n, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(fail(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(entries)
}

/// Overwrites every parameter of `store` with the matching entry. Names,
/// order and shapes must agree exactly.
pub fn restore(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::argument(
            "checkpoint",
            format!("{} entries for {} parameters", entries.len(), store.len()),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.iter().zip(&entries) {
        if store.name(*id) != name || store.get(*id).shape() != t.shape() {
            return Err(Error::argument(
                "checkpoint",
                format!(
                    "entry {name} {:?} does not match parameter {} {:?}",
                    t.shape(),
                    store.name(*id),
                    store.get(*id).shape()
                ),
            ));
        }
    }
    for (id, (_, t)) in ids.into_iter().zip(entries) {
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    restore(store, decode_checkpoint(&bytes)?)
}
