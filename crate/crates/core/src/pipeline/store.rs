//! Artifact persistence: manifests with content hashes, panels and
//! prediction blobs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::SlicePrediction;
use crate::ingest::{Panel, TimeGrid};
use crate::util::{self, f64_from_le_bytes, f64_to_le_bytes};
use crate::windows::WindowSlice;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

/// Provenance record of one command's outputs. Paths are relative to the
/// working directory; no timestamps, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn rel(workdir: &Path, p: &Path) -> String {
    p.strip_prefix(workdir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(util::sha256_hex(&util::read_bytes(path)?))
}

/// All regular files under `dir` except its manifest, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::Io {
            path: d.display().to_string(),
            source: e,
        })?;
        for e in entries {
            let p = e
                .map_err(|e| Error::Io {
                    path: d.display().to_string(),
                    source: e,
                })?
                .path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn hash_map(workdir: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files.iter().map(|f| Ok((rel(workdir, f), hash_file(f)?))).collect()
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&util::read_to_string(&p)?)?))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        util::write(&dir.join(MANIFEST), text)
    }

    /// True when every recorded input and output still has its hash.
    pub fn is_current(&self, workdir: &Path, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
        if self.config_hash != config_hash || &self.inputs != inputs || self.version != env!("CARGO_PKG_VERSION") {
            return false;
        }
        self.outputs
            .iter()
            .all(|(p, h)| hash_file(&workdir.join(p)).is_ok_and(|x| &x == h))
    }
}

/// A stage directory whose manifest must exist and match `expected_hash`.
pub fn require(workdir: &Path, dir: &str, producer: &str, expected_hash: &str) -> Result<Manifest> {
    let d = workdir.join(dir);
    let m = Manifest::load(&d)?.ok_or_else(|| Error::Prerequisite {
        artifact: d.join(MANIFEST).display().to_string(),
        producer: producer.to_string(),
    })?;
    if m.config_hash != expected_hash {
        return Err(Error::Stale {
            artifact: d.display().to_string(),
            producer: producer.to_string(),
            found: short(&m.config_hash),
            expected: short(expected_hash),
        });
    }
    for (p, h) in &m.outputs {
        let ok = hash_file(&workdir.join(p)).is_ok_and(|x| &x == h);
        if !ok {
            return Err(Error::Stale {
                artifact: p.clone(),
                producer: producer.to_string(),
                found: "modified or missing file".into(),
                expected: short(h),
            });
        }
    }
    Ok(m)
}

fn short(h: &str) -> String {
    h.chars().take(12).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PanelMeta {
    links: Vec<String>,
    grid: TimeGrid,
}

/// Writes `<stem>.json` (links, grid) and `<stem>.bin` (values, then the
/// missing mask as 0/1 values).
pub fn save_panel(dir: &Path, stem: &str, p: &Panel) -> Result<()> {
    let meta = PanelMeta {
        links: p.links().to_vec(),
        grid: p.grid().clone(),
    };
    util::write(&dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&meta)?)?;
    let mut v = p.values().to_vec();
    v.extend(p.missing_mask().iter().map(|&m| if m { 1.0 } else { 0.0 }));
    util::write(&dir.join(format!("{stem}.bin")), f64_to_le_bytes(&v))
}

pub fn load_panel(dir: &Path, stem: &str) -> Result<Panel> {
    let meta: PanelMeta = serde_json::from_str(&util::read_to_string(&dir.join(format!("{stem}.json")))?)?;
    let v = f64_from_le_bytes(&util::read_bytes(&dir.join(format!("{stem}.bin")))?)?;
    let n = meta.links.len() * meta.grid.total_steps();
    if v.len() != 2 * n {
        return Err(Error::Data(format!("panel {stem} has {} values, expected {}", v.len(), 2 * n)));
    }
    let missing = v[n..].iter().map(|&m| m > 0.5).collect();
    Panel::with_missing(meta.links, meta.grid, v[..n].to_vec(), missing)
}

/// Point forecasts for `slices`, `h` values each, as one little-endian blob.
pub fn save_points(path: &Path, preds: &[SlicePrediction]) -> Result<()> {
    let flat: Vec<f64> = preds.iter().flat_map(|p| p.point.iter().copied()).collect();
    util::write(path, f64_to_le_bytes(&flat))
}

pub fn load_points(path: &Path, slices: &[WindowSlice], h: usize) -> Result<Vec<SlicePrediction>> {
    let v = f64_from_le_bytes(&util::read_bytes(path)?)?;
    if v.len() != slices.len() * h {
        return Err(Error::Data(format!(
            "{} holds {} values, expected {}",
            path.display(),
            v.len(),
            slices.len() * h
        )));
    }
    Ok(slices
        .iter()
        .zip(v.chunks(h))
        .map(|(s, p)| SlicePrediction { slice: *s, point: p.to_vec() })
        .collect())
}
