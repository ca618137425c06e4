//! Single-file checkpoints: a one-line JSON manifest, then a raw blob of
//! little-endian f32 parameter data in manifest order.
//!
//! The manifest records the format version, the run configuration that
//! produced the checkpoint (as opaque JSON), and for every parameter its
//! name, shape, dtype, and byte offset into the blob.

use super::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported dtype {0:?} for parameter {1:?}")]
    Dtype(String, String),
    #[error("blob truncated: parameter {name:?} needs bytes [{start}, {end}) of {have}")]
    Truncated { name: String, start: usize, end: usize, have: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Write all parameters (trainable or not) with the run config embedded.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    config: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (_, p) in store.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: vec![p.value.rows(), p.value.cols()],
            dtype: "f32".to_string(),
            offset,
        });
        offset += p.value.len() * 4;
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params: entries,
    };
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a checkpoint into a fresh store (registration order = manifest
/// order). Returns the store and the embedded run config.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value), CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| io_err(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&line)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(|e| io_err(path, e))?;

    let mut store = ParamStore::new();
    for entry in &manifest.params {
        if entry.dtype != "f32" {
            return Err(CheckpointError::Dtype(entry.dtype.clone(), entry.name.clone()));
        }
        let (rows, cols) = (entry.shape[0], entry.shape[1]);
        let n_bytes = rows * cols * 4;
        let end = entry.offset + n_bytes;
        if end > blob.len() {
            return Err(CheckpointError::Truncated {
                name: entry.name.clone(),
                start: entry.offset,
                end,
                have: blob.len(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in blob[entry.offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        store.register(&entry.name, Tensor::from_vec(rows, cols, data));
    }
    Ok((store, manifest.config))
}
