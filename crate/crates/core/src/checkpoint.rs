//! Bit-exact model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest records a caller-supplied metadata document (hyperparameters,
//! seed) and the name and shape of every tensor; the blob stores each
//! tensor's values as little-endian 64-bit floats, concatenated in manifest
//! order. Saving and loading round-trips every bit.

use std::error::Error;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor2D;
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    Io {
        path: String,
        message: String,
    },
    /// The manifest is unreadable or disagrees with this format version.
    Format {
        message: String,
    },
    /// The blob length does not match the manifest's shapes.
    BlobSize {
        expected_bytes: usize,
        got_bytes: usize,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, message } => write!(f, "{path}: {message}"),
            CheckpointError::Format { message } => {
                write!(f, "malformed checkpoint manifest: {message}")
            }
            CheckpointError::BlobSize {
                expected_bytes,
                got_bytes,
            } => write!(
                f,
                "weight blob holds {got_bytes} bytes, manifest expects {expected_bytes}"
            ),
        }
    }
}

impl Error for CheckpointError {}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path, e: impl fmt::Display) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `manifest.json` and `weights.bin` under `dir`, creating it if
/// needed. `meta` is any serializable document (training config, seed);
/// tensors are stored in the given order.
pub fn save_checkpoint<F: Scalar, M: Serialize>(
    dir: &Path,
    meta: &M,
    tensors: &[(String, &Tensor2D<F>)],
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: serde_json::to_value(meta).map_err(|e| CheckpointError::Format {
            message: e.to_string(),
        })?,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Format {
        message: e.to_string(),
    })?;
    fs::write(&manifest_path, body).map_err(|e| io_err(&manifest_path, e))?;

    let mut blob = Vec::new();
    for (_, t) in tensors {
        for &x in t.data() {
            blob.extend_from_slice(&x.to_f64().expect("scalar converts to f64").to_le_bytes());
        }
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, blob).map_err(|e| io_err(&weights_path, e))
}

/// Tensors in manifest order, each under its manifest name.
pub type NamedTensors<F> = Vec<(String, Tensor2D<F>)>;

/// Reads back a checkpoint saved by [`save_checkpoint`], returning the
/// metadata document and the named tensors in manifest order.
pub fn load_checkpoint<F: Scalar, M: DeserializeOwned>(
    dir: &Path,
) -> Result<(M, NamedTensors<F>), CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let body = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&body).map_err(|e| CheckpointError::Format {
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Format {
            message: format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }
    let meta: M = serde_json::from_value(manifest.meta).map_err(|e| CheckpointError::Format {
        message: e.to_string(),
    })?;

    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if blob.len() != total * 8 {
        return Err(CheckpointError::BlobSize {
            expected_bytes: total * 8,
            got_bytes: blob.len(),
        });
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 0;
    for entry in manifest.tensors {
        let len = entry.rows * entry.cols;
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let start = (offset + i) * 8;
            let bytes: [u8; 8] = blob[start..start + 8].try_into().expect("8-byte chunk");
            values.push(f64::from_le_bytes(bytes));
        }
        offset += len;
        let tensor = Tensor2D::from_f64_vec(entry.rows, entry.cols, &values).map_err(|e| {
            CheckpointError::Format {
                message: format!("tensor {}: {e}", entry.name),
            }
        })?;
        tensors.push((entry.name, tensor));
    }
    Ok((meta, tensors))
}
