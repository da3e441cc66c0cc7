//! Parameter checkpoints: a JSON manifest plus one flat little-endian blob.
//!
//! `<stem>.json` lists every parameter's name, shape and element offset;
//! `<stem>.bin` holds the concatenated `f64` values. Saving and loading is
//! bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{AutodiffError, ParamStore, Result, Tensor};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    pub total: usize,
    pub params: Vec<ManifestEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn manifest_of(store: &ParamStore) -> Manifest {
    let mut offset = 0;
    let params = store
        .iter()
        .map(|(_, p)| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len: p.value.len(),
            };
            offset += p.value.len();
            e
        })
        .collect();
    Manifest {
        format: CHECKPOINT_FORMAT,
        dtype: "f64-le".to_string(),
        total: offset,
        params,
    }
}

/// Flattens all parameters into the blob layout.
pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.numel() * 8);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(store: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (json, bin) = paths(dir, stem);
    let manifest = manifest_of(store);
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(&bin, to_bytes(store))?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<ParamStore> {
    let (json, bin) = paths(dir, stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let bytes = fs::read(&bin)?;
    if bytes.len() != manifest.total * 8 {
        return Err(AutodiffError::Checkpoint(format!(
            "blob has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total * 8
        )));
    }
    let mut store = ParamStore::new();
    for e in manifest.params {
        let data: Vec<f64> = bytes[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(store)
}
