//! Single-file parameter container.
//!
//! Layout: the 8-byte magic `IBTCKPT1`, a little-endian `u64` byte length,
//! a UTF-8 manifest with one `name<TAB>f64<TAB>d0,d1,..` line per entry, then
//! the raw little-endian `f64` payloads in manifest order.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{IbtError, Result};

pub const MAGIC: &[u8; 8] = b"IBTCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut manifest = String::new();
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{}\tf64\t{}\n", p.name, dims.join(",")));
    }
    let payload: usize = store.iter().map(|(_, p)| p.tensor().numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + manifest.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, p) in store.iter() {
        for v in p.tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let bad = |msg: String| IbtError::Checkpoint(msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing IBTCKPT1 header magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("manifest length {len} exceeds file size")))?;
    let manifest = std::str::from_utf8(&bytes[16..manifest_end])
        .map_err(|e| bad(format!("manifest is not UTF-8: {e}")))?;

    let mut entries = Vec::new();
    let mut offset = manifest_end;
    for (lineno, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, dims] = fields.as_slice() else {
            return Err(bad(format!("manifest line {} is malformed: {line:?}", lineno + 1)));
        };
        if *dtype != "f64" {
            return Err(bad(format!("{name}: unsupported dtype {dtype}")));
        }
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("{name}: bad shape {dims:?}: {e}")))?
        };
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("{name}: payload truncated")))?;
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape,
            data,
        });
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    Ok(entries)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| IbtError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| IbtError::io(path, e))?;
    decode(&bytes)
}

/// Copies checkpoint values into `store`. Both sides must hold exactly the
/// same names and shapes; the first difference is reported by name.
pub fn restore(store: &mut ParamStore, entries: &[CheckpointEntry]) -> Result<()> {
    for e in entries {
        let id = store
            .id(&e.name)
            .ok_or_else(|| IbtError::Checkpoint(format!("checkpoint has unknown parameter {}", e.name)))?;
        if store.get(id).shape() != e.shape.as_slice() {
            return Err(IbtError::Checkpoint(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                e.name,
                e.shape,
                store.get(id).shape()
            )));
        }
    }
    if let Some((_, missing)) = store
        .iter()
        .find(|(_, p)| !entries.iter().any(|e| e.name == p.name))
    {
        return Err(IbtError::Checkpoint(format!(
            "parameter {} is missing from the checkpoint",
            missing.name
        )));
    }
    for e in entries {
        let id = store.id(&e.name).expect("checked above");
        store.set_data(id, e.data.clone())?;
    }
    Ok(())
}
