//! Raw little-endian arrays with JSON sidecars.
//!
//! `name.raw` holds the samples; `name.json` holds a [`Sidecar`].

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Complex64,
    Uint8,
    Uint16,
}

impl DType {
    pub fn bytes(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Complex64 => 8,
            DType::Uint8 => 1,
            DType::Uint16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub stage: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("raw"), base.with_extension("json"))
}

fn write_pair(base: &Path, bytes: &[u8], sidecar: &Sidecar) -> Result<()> {
    let n: usize = sidecar.shape.iter().product();
    if n * sidecar.dtype.bytes() != bytes.len() {
        return Err(Error::LengthMismatch(bytes.len(), n * sidecar.dtype.bytes()));
    }
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let (raw, json) = paths(base);
    fs::write(raw, bytes)?;
    fs::write(json, serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(())
}

fn read_pair(base: &Path, dtype: DType) -> Result<(Vec<u8>, Sidecar)> {
    let (raw, json) = paths(base);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(json)?)?;
    if sidecar.dtype != dtype {
        return Err(Error::Io(format!("{}: expected {dtype:?}, found {:?}", base.display(), sidecar.dtype)));
    }
    let bytes = fs::read(raw)?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * dtype.bytes() {
        return Err(Error::LengthMismatch(bytes.len(), n * dtype.bytes()));
    }
    Ok((bytes, sidecar))
}

pub fn read_sidecar(base: &Path) -> Result<Sidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?)
}

pub fn exists(base: &Path) -> bool {
    let (raw, json) = paths(base);
    raw.is_file() && json.is_file()
}

fn sidecar(dtype: DType, shape: &[usize], stage: &str, hash: &str, meta: serde_json::Value) -> Sidecar {
    Sidecar { dtype, shape: shape.to_vec(), stage: stage.into(), config_hash: hash.into(), meta }
}

pub fn write_f32(base: &Path, data: &[f64], shape: &[usize], stage: &str, hash: &str, meta: serde_json::Value) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_pair(base, &bytes, &sidecar(DType::Float32, shape, stage, hash, meta))
}

pub fn write_c64(base: &Path, data: &[Complex64], shape: &[usize], stage: &str, hash: &str, meta: serde_json::Value) -> Result<()> {
    let bytes: Vec<u8> = data
        .iter()
        .flat_map(|c| {
            let mut b = [0u8; 8];
            b[..4].copy_from_slice(&(c.re as f32).to_le_bytes());
            b[4..].copy_from_slice(&(c.im as f32).to_le_bytes());
            b
        })
        .collect();
    write_pair(base, &bytes, &sidecar(DType::Complex64, shape, stage, hash, meta))
}

pub fn write_u8(base: &Path, data: &[u8], shape: &[usize], stage: &str, hash: &str, meta: serde_json::Value) -> Result<()> {
    write_pair(base, data, &sidecar(DType::Uint8, shape, stage, hash, meta))
}

pub fn write_u16(base: &Path, data: &[u16], shape: &[usize], stage: &str, hash: &str, meta: serde_json::Value) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(base, &bytes, &sidecar(DType::Uint16, shape, stage, hash, meta))
}

pub fn read_f32(base: &Path) -> Result<(Vec<f64>, Sidecar)> {
    let (bytes, sc) = read_pair(base, DType::Float32)?;
    let v = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((v, sc))
}

pub fn read_c64(base: &Path) -> Result<(Vec<Complex64>, Sidecar)> {
    let (bytes, sc) = read_pair(base, DType::Complex64)?;
    let v = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64;
            Complex64::new(re, im)
        })
        .collect();
    Ok((v, sc))
}

pub fn read_u8(base: &Path) -> Result<(Vec<u8>, Sidecar)> {
    read_pair(base, DType::Uint8)
}

pub fn read_u16(base: &Path) -> Result<(Vec<u16>, Sidecar)> {
    let (bytes, sc) = read_pair(base, DType::Uint16)?;
    Ok((bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(), sc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("sub/a");
        write_f32(&base, &[1.0, -2.5, 3.25], &[3], "phantom", "abc", serde_json::Value::Null).unwrap();
        let (v, sc) = read_f32(&base).unwrap();
        assert_eq!(v, vec![1.0, -2.5, 3.25]);
        assert_eq!(sc.stage, "phantom");
        assert!(read_c64(&base).is_err());
        let c = [Complex64::new(1.0, -1.0), Complex64::new(0.5, 2.0)];
        write_c64(&base, &c, &[2], "s", "h", serde_json::json!({"units": "a.u."})).unwrap();
        assert_eq!(read_c64(&base).unwrap().0, c.to_vec());
        assert!(write_u8(&base, &[1, 2], &[3], "s", "h", serde_json::Value::Null).is_err());
        write_u16(&base, &[7, 65535], &[2], "s", "h", serde_json::Value::Null).unwrap();
        assert_eq!(read_u16(&base).unwrap().0, vec![7, 65535]);
    }
}
