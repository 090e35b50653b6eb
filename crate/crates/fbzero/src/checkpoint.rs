//! Model checkpoint container: a one-line magic header with the JSON
//! directory length, a JSON tensor directory, then all tensors as contiguous
//! little-endian f32 payload. Parameters are kept exactly f32-representable
//! in memory, so the roundtrip is bitwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "FBZC";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic line)")]
    BadMagic,
    #[error("unsupported checkpoint schema {0}")]
    Schema(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}` overlaps the payload directory")]
    Overlap { name: String },
    #[error("truncated payload: expected {expected} f32 values, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("tensor `{name}` has shape [{got_r}, {got_c}], run expects [{want_r}, {want_c}]")]
    ShapeMismatch { name: String, want_r: usize, want_c: usize, got_r: usize, got_c: usize },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint carries unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("config hash mismatch: run has {ours}, checkpoint has {theirs}")]
    HashMismatch { ours: String, theirs: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema: u32,
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.rows * t.cols).sum()
    }
}

/// Write the file atomically (temp file + rename). Tensors are laid out in
/// the store's name order, densely packed.
pub fn save(
    path: &Path,
    store: &ParamStore,
    config_hash: &str,
    step: u64,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.rows() * t.cols();
    }
    let header = CheckpointHeader {
        schema: CHECKPOINT_SCHEMA,
        config_hash: config_hash.to_string(),
        step,
        tensors,
    };
    let header_json = serde_json::to_string(&header).expect("header serializes");
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "{CHECKPOINT_MAGIC} {}", header_json.len())?;
        f.write_all(header_json.as_bytes())?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse and validate the whole file; nothing is returned unless the
/// directory is in-bounds, non-overlapping, and the payload is complete.
pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CheckpointError::BadMagic)?;
    let magic_line = std::str::from_utf8(&bytes[..nl]).map_err(|_| CheckpointError::BadMagic)?;
    let mut parts = magic_line.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let header_len: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or(CheckpointError::BadMagic)?;
    let header_start = nl + 1;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(CheckpointError::Header("header extends past end of file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.schema != CHECKPOINT_SCHEMA {
        return Err(CheckpointError::Schema(header.schema));
    }
    let payload = &bytes[payload_start..];
    let got = payload.len() / 4;
    let expected = header.payload_len();
    if payload.len() % 4 != 0 || got != expected {
        return Err(CheckpointError::Truncated { expected, got });
    }
    // Non-overlap and bounds: entries must tile the payload without gaps
    // when sorted by offset.
    let mut sorted: Vec<&TensorEntry> = header.tensors.iter().collect();
    sorted.sort_by_key(|t| t.offset);
    let mut cursor = 0usize;
    for t in &sorted {
        if t.offset != cursor {
            return Err(CheckpointError::Overlap { name: t.name.clone() });
        }
        cursor += t.rows * t.cols;
    }
    if cursor != expected {
        return Err(CheckpointError::Header("directory does not cover payload".into()));
    }
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let start = t.offset * 4;
        let n = t.rows * t.cols;
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let b = &payload[start + 4 * i..start + 4 * i + 4];
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            })
            .collect();
        store.insert(&t.name, Tensor::new(t.rows, t.cols, data));
    }
    Ok((header, store))
}

/// Copy loaded tensors into an existing store, demanding identical names and
/// shapes; the first mismatch is reported by tensor name.
pub fn apply(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), CheckpointError> {
    for name in target.names() {
        if loaded.get(name).is_err() {
            return Err(CheckpointError::MissingTensor(name.clone()));
        }
    }
    let names: Vec<String> = loaded.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let src = loaded.get(&name).unwrap().clone();
        let dst = target
            .get(&name)
            .map_err(|_| CheckpointError::UnknownTensor(name.clone()))?;
        if dst.shape() != src.shape() {
            let (want_r, want_c) = dst.shape();
            let (got_r, got_c) = src.shape();
            return Err(CheckpointError::ShapeMismatch { name, want_r, want_c, got_r, got_c });
        }
        target.set(&name, src).unwrap();
    }
    Ok(())
}

/// Refuse checkpoints produced under a different resolved config.
pub fn check_hash(header: &CheckpointHeader, expected: &str) -> Result<(), CheckpointError> {
    if header.config_hash != expected {
        return Err(CheckpointError::HashMismatch {
            ours: expected.to_string(),
            theirs: header.config_hash.clone(),
        });
    }
    Ok(())
}
