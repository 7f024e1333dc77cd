//! Parameter checkpoints: a little-endian `f64` blob plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Hex SHA-256 of the JSON form of the model spec.
    pub spec_hash: String,
    pub step: usize,
    pub loss: f64,
    pub params: usize,
    pub file: String,
}

pub fn spec_hash<S: Serialize>(spec: &S) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(spec)?)))
}

/// Writes `<name>.bin` and `<name>.json` into `dir`; returns the manifest path.
pub fn save_checkpoint<T: Scalar, S: Serialize>(
    dir: &Path,
    name: &str,
    spec: &S,
    step: usize,
    loss: T,
    params: &[T],
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let file = format!("{name}.bin");
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.as_f64().to_le_bytes()).collect();
    fs::write(dir.join(&file), bytes)?;
    let manifest = CheckpointManifest { spec_hash: spec_hash(spec)?, step, loss: loss.as_f64(), params: params.len(), file };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Reads a checkpoint back, checking the blob length against the manifest.
pub fn load_checkpoint<T: Scalar>(dir: &Path, name: &str) -> Result<(CheckpointManifest, Vec<T>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let bytes = fs::read(dir.join(&manifest.file))?;
    if bytes.len() != manifest.params * 8 {
        return Err(Error::Argument(format!(
            "checkpoint blob has {} bytes, manifest promises {} parameters",
            bytes.len(),
            manifest.params
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Ok((manifest, params))
}
