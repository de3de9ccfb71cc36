//! Parameter checkpoints: one raw little-endian f64 file plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::ParamStore;
use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f64"), stem.with_extension("json"))
}

/// Writes `stem.f64` and `stem.json`; entries are stored in name order.
pub fn save(stem: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let (raw, json) = paths(stem);
    let mut bytes = Vec::with_capacity(8 * store.n_values());
    let mut entries = Vec::with_capacity(store.params.len());
    for (name, p) in &store.params {
        let v = p.value.expect_real(name)?;
        bytes.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        entries.push(ManifestEntry { name: name.clone(), shape: p.value.shape.clone(), role: p.role.clone() });
    }
    if let Some(dir) = raw.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&raw, bytes)?;
    fs::write(&json, serde_json::to_vec_pretty(&Manifest { entries, meta })?)?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let (raw, json) = paths(stem);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&json)?)?;
    let bytes = fs::read(&raw)?;
    let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != 8 * total {
        return Err(Error::Io(format!("{}: {} bytes for {total} values", raw.display(), bytes.len())));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for e in manifest.entries {
        let n = e.shape.iter().product();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(&e.name, Array::real(&e.shape, v), &e.role);
    }
    Ok((store, manifest.meta))
}
