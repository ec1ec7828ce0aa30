//! On-disk sample stores: raw little-endian `f64`, row-major, next to a JSON
//! sidecar (`<file>.json`) describing the shape.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::samples::Samples;

pub const STORE_FORMAT: &str = "f64-le-row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format: String,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub generation: usize,
    /// SHA-256 of the raw bytes.
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn store_err(path: &Path, reason: impl Into<String>) -> LabError {
    LabError::Store {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn to_bytes(samples: &Samples) -> Vec<u8> {
    samples.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes the store and its sidecar; returns the sidecar contents.
pub fn write_store(path: &Path, samples: &Samples, seed: u64, generation: usize) -> Result<StoreMeta> {
    let bytes = to_bytes(samples);
    let meta = StoreMeta {
        format: STORE_FORMAT.to_string(),
        n: samples.len(),
        dim: samples.dim(),
        seed,
        generation,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    std::fs::File::create(path)?.write_all(&bytes)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Reads a store, checking it against the sidecar.
pub fn read_store(path: &Path) -> Result<(Samples, StoreMeta)> {
    let meta: StoreMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta.format != STORE_FORMAT {
        return Err(store_err(path, format!("unknown format `{}`", meta.format)));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let expected = meta.n * meta.dim * 8;
    if bytes.len() != expected {
        return Err(store_err(path, format!("holds {} bytes, sidecar implies {expected}", bytes.len())));
    }
    if hex::encode(Sha256::digest(&bytes)) != meta.sha256 {
        return Err(store_err(path, "checksum mismatch"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((Samples::new(meta.dim, data)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.f64");
        let s = Samples::new(2, vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0]).unwrap();
        let meta = write_store(&path, &s, 9, 4).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        let (back, m) = read_store(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, meta);
        // little-endian, row-major: second value of the first row
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(f64::from_le_bytes(raw[8..16].try_into().unwrap()), -2.5);
    }

    #[test]
    fn truncated_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.f64");
        write_store(&path, &Samples::zeros(3, 2), 0, 0).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..40]).unwrap();
        assert!(matches!(read_store(&path), Err(LabError::Store { .. })));
    }
}
