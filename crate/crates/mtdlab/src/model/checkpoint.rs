//! Checkpoint container: a documented little-endian binary holding a model
//! spec, free-form provenance metadata, and the named parameter tensors,
//! bit-exact across a save/load round trip.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `b"MTDM"` |
//! | 4     | format version, `u32` (currently 1) |
//! | 8     | config block length, `u64` |
//! | …     | config block: the model spec as UTF-8 JSON |
//! | 8     | meta entry count, `u64` |
//!
//! then, per meta entry (sorted by key, each key unique):
//!
//! | bytes | content |
//! |-------|---------|
//! | 2     | key length, `u16` |
//! | …     | key, UTF-8 |
//! | 4     | value length, `u32` |
//! | …     | value, UTF-8 |
//!
//! then `u64` tensor count, and per tensor:
//!
//! | bytes | content |
//! |-------|---------|
//! | 2     | name length, `u16` |
//! | …     | name, UTF-8 |
//! | 8 + 8 | rows, cols, `u64` each |
//! | rows·cols·8 | values, `f64`, row-major |
//!
//! Tensors may appear in any order but each expected name must appear
//! exactly once with the shape the spec implies; trailing bytes are
//! rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{MicroModel, ModelSpec};

pub const MAGIC: [u8; 4] = *b"MTDM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
}

fn format_err<T>(offset: usize, what: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Format { offset: offset as u64, what: what.into() })
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return format_err(
                self.pos,
                format!("unexpected end of file reading {what} ({n} bytes needed)"),
            );
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Serializes a model and its provenance metadata to the checkpoint byte
/// layout. Meta entries are written in `BTreeMap` order (sorted by key), so
/// equal inputs give byte-identical files.
pub fn to_bytes(model: &MicroModel, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let config = serde_json::to_vec(&model.spec).expect("model spec serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    for (key, value) in meta {
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        out.extend_from_slice(value.as_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, tensor) in model.params.names().iter().zip(model.params.values()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(tensor.ncols() as u64).to_le_bytes());
        for &v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint, validating the spec and that the tensor table holds
/// exactly the parameters that spec implies, each with the right shape.
pub fn from_bytes(bytes: &[u8]) -> Result<(MicroModel, BTreeMap<String, String>), CheckpointError> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return format_err(0, format!("bad magic {magic:?}, expected {MAGIC:?}"));
    }
    let version_at = cur.pos;
    let version = cur.u32("version")?;
    if version != VERSION {
        return format_err(version_at, format!("unsupported version {version}, expected {VERSION}"));
    }
    let config_len = cur.u64("config length")? as usize;
    let config_at = cur.pos;
    let config = cur.take(config_len, "config block")?;
    let spec: ModelSpec = match serde_json::from_slice(config) {
        Ok(s) => s,
        Err(e) => return format_err(config_at, format!("config block is not valid JSON: {e}")),
    };
    if let Err(e) = spec.validate() {
        return format_err(config_at, format!("config block invalid: {e}"));
    }

    // A freshly initialized model supplies the expected names and shapes.
    let mut model = match MicroModel::new(spec, 0) {
        Ok(m) => m,
        Err(e) => return format_err(config_at, format!("config block invalid: {e}")),
    };

    let meta_count_at = cur.pos;
    let meta_count = cur.u64("meta entry count")? as usize;
    // Each entry needs at least 6 bytes of framing; an absurd count means a
    // corrupt length field, caught before any huge allocation.
    if meta_count.saturating_mul(6) > bytes.len() {
        return format_err(meta_count_at, format!("implausible meta entry count {meta_count}"));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..meta_count {
        let key_at = cur.pos;
        let key_len = cur.u16("meta key length")? as usize;
        let key_bytes = cur.take(key_len, "meta key")?;
        let key = match std::str::from_utf8(key_bytes) {
            Ok(k) => k.to_string(),
            Err(_) => return format_err(key_at, "meta key is not UTF-8"),
        };
        let value_at = cur.pos;
        let value_len = cur.u32("meta value length")? as usize;
        let value_bytes = cur.take(value_len, "meta value")?;
        let value = match std::str::from_utf8(value_bytes) {
            Ok(v) => v.to_string(),
            Err(_) => return format_err(value_at, "meta value is not UTF-8"),
        };
        if meta.insert(key, value).is_some() {
            return format_err(key_at, "meta key appears twice");
        }
    }

    let count_at = cur.pos;
    let count = cur.u64("tensor count")? as usize;
    if count != model.params.len() {
        return format_err(
            count_at,
            format!("{count} tensors stored but the spec implies {}", model.params.len()),
        );
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for _ in 0..count {
        let name_at = cur.pos;
        let name_len = cur.u16("tensor name length")? as usize;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = match std::str::from_utf8(name_bytes) {
            Ok(n) => n.to_string(),
            Err(_) => return format_err(name_at, "tensor name is not UTF-8"),
        };
        if !model.params.contains(&name) {
            return format_err(name_at, format!("unknown tensor {name:?} for this spec"));
        }
        if !seen.insert(name.clone()) {
            return format_err(name_at, format!("tensor {name:?} appears twice"));
        }
        let shape_at = cur.pos;
        let rows = cur.u64("tensor rows")? as usize;
        let cols = cur.u64("tensor cols")? as usize;
        let tensor = model.params.get_mut(&name);
        if (rows, cols) != tensor.dim() {
            return format_err(
                shape_at,
                format!("tensor {name:?} stored as {rows}×{cols}, expected {:?}", tensor.dim()),
            );
        }
        let data = cur.take(rows * cols * 8, "tensor values")?;
        for (slot, chunk) in tensor.iter_mut().zip(data.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return format_err(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok((model, meta))
}

/// Writes a checkpoint file.
pub fn save<P: AsRef<Path>>(
    path: P,
    model: &MicroModel,
    meta: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, meta)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a checkpoint file.
pub fn load<P: AsRef<Path>>(
    path: P,
) -> Result<(MicroModel, BTreeMap<String, String>), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
