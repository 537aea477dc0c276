//! Flat binary parameter files.
//!
//! Layout (all integers little-endian `u32`):
//! `"MFCKPT1"`, count, then per tensor: name length, UTF-8 name, rank,
//! extents, and `numel` little-endian `f32` values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MFCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn encode_checkpoint<'a, T: Scalar>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let corrupt = |what: &str| CheckpointError::Corrupt(format!("truncated while reading {what}"));
    let u32_at = |r: &mut &[u8], what: &str| -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| corrupt(what))?;
        Ok(u32::from_le_bytes(b))
    };
    let count = u32_at(&mut r, "count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(&mut r, "name length")? as usize;
        if r.len() < len {
            return Err(CheckpointError::Corrupt("truncated name".into()));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?
            .to_string();
        r = &r[len..];
        let rank = u32_at(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut r, "extent")? as usize);
        }
        let n: usize = shape.iter().product();
        if r.len() < n * 4 {
            return Err(CheckpointError::Corrupt(format!("truncated payload of {name}")));
        }
        let data = r[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r = &r[n * 4..];
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
    }
    Ok(out)
}

/// Writes atomically: the payload goes to a sibling temp file which is then
/// renamed over `path`.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(store.ids().map(|id| (store.name(id), store.value(id))));
    write_bytes_atomic(path, &bytes)?;
    Ok(())
}

/// Loads every parameter of `store` from `path`. All model parameters must
/// be present with matching shapes; extra entries are ignored.
pub fn read_checkpoint<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
    let entries = decode_checkpoint(&fs::read(path)?)?;
    let map: std::collections::HashMap<_, _> = entries.into_iter().collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = map.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let expected = store.value(id).shape().to_vec();
        if t.shape() != expected.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: t.shape().to_vec(),
            });
        }
        *store.value_mut(id) = t.cast();
    }
    Ok(())
}
