//! Checkpoint format: a JSON manifest (parameter names, shapes, config hash,
//! free-form metadata) followed by a flat little-endian blob of f64 values.
//!
//! Layout: 8-byte magic `CFCKPT01`, u64-LE manifest length, manifest JSON,
//! then the concatenated parameter values in manifest order.

use crate::params::ParamSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CFCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic header (not a checkpoint file)")]
    BadMagic,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("value blob has {got} doubles, manifest expects {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    meta: BTreeMap<String, String>,
    params: Vec<ManifestParam>,
}

pub struct Checkpoint {
    pub params: ParamSet,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
}

pub fn save(
    path: &Path,
    params: &ParamSet,
    config_hash: &str,
    meta: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        meta: meta.clone(),
        params: params
            .entries()
            .iter()
            .map(|e| ManifestParam {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    let mut blob = Vec::with_capacity(params.total_values() * 8);
    for e in params.entries() {
        for v in &e.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Manifest(
            "value blob is not a whole number of doubles".into(),
        ));
    }
    let doubles: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if doubles.len() != expected {
        return Err(CheckpointError::LengthMismatch {
            got: doubles.len(),
            expected,
        });
    }
    let mut params = ParamSet::new();
    let mut offset = 0;
    for p in manifest.params {
        let len: usize = p.shape.iter().product();
        params.add(p.name, p.shape, doubles[offset..offset + len].to_vec());
        offset += len;
    }
    Ok(Checkpoint {
        params,
        config_hash: manifest.config_hash,
        meta: manifest.meta,
    })
}
