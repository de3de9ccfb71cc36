//! Stage directories: array files with sidecars plus a manifest that keys the
//! directory by config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Paths relative to the directory, sorted.
    pub files: Vec<String>,
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.push(rel);
            }
        }
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Option<Manifest> {
    serde_json::from_slice(&fs::read(dir.join(MANIFEST)).ok()?).ok()
}

/// True when `dir` holds a complete output for `hash`.
pub fn is_complete(dir: &Path, hash: &str) -> bool {
    match read_manifest(dir) {
        Some(m) => m.config_hash == hash && m.files.iter().all(|f| dir.join(f).is_file()),
        None => false,
    }
}

/// Fails unless an upstream directory is complete for `hash`.
pub fn require(dir: &Path, hash: &str, stage: &str) -> Result<()> {
    if is_complete(dir, hash) {
        return Ok(());
    }
    let why = match read_manifest(dir) {
        Some(m) if m.config_hash != hash => format!("was produced by config {}, expected {hash}", m.config_hash),
        Some(_) => "is incomplete".to_string(),
        None => "does not exist".to_string(),
    };
    Err(Error::MissingArtifact(format!("{} {why}; run the `{stage}` stage first", dir.display())))
}

/// Clears a stale or partial directory before a stage rewrites it.
pub fn reset(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Records every file currently under `dir`; written last, so a crash leaves
/// the directory incomplete.
pub fn seal(dir: &Path, stage: &str, hash: &str) -> Result<()> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let m = Manifest { stage: stage.into(), config_hash: hash.into(), files };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Adds `stage` and `config_hash` to a JSON object file.
pub fn stamp_json(path: &Path, stage: &str, hash: &str) -> Result<()> {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let obj = v.as_object_mut().ok_or_else(|| Error::Io(format!("{} is not a JSON object", path.display())))?;
    obj.insert("stage".into(), stage.into());
    obj.insert("config_hash".into(), hash.into());
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// All files under `root`, relative and sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if root.is_dir() {
        walk_all(root, root, &mut out)?;
    }
    out.sort();
    Ok(out)
}

fn walk_all(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk_all(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}
