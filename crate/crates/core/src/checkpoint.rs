//! Checkpoint files: one JSON header line followed by raw little-endian parameter blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::error::{Error, Result};
use crate::nn::TensorRef;

pub const CHECKPOINT_FORMAT: &str = "accentkit-ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// Model family, e.g. `"aid"`, `"gen"`, `"probe"`.
    pub kind: String,
    pub dtype: Dtype,
    /// Model configuration and any non-tensor state.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

pub fn encode(kind: &str, config: serde_json::Value, tensors: &[TensorRef<'_>]) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        kind: kind.to_string(),
        dtype: Dtype::F64,
        config,
        tensors: tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for t in tensors {
        blob::push_f64s(&mut out, t.data);
    }
    out
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::validation("checkpoint", "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::validation("checkpoint header", e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::validation(
            "checkpoint header",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if header.kind != expected_kind {
        return Err(Error::validation(
            "checkpoint kind",
            format!("expected '{expected_kind}', found '{}'", header.kind),
        ));
    }
    let body = &bytes[newline + 1..];
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        tensors.push(blob::read_floats(body, offset, n, header.dtype)?);
        offset += n * header.dtype.width();
    }
    if offset != body.len() {
        return Err(Error::validation(
            "checkpoint",
            format!("{} trailing bytes after declared tensors", body.len() - offset),
        ));
    }
    Ok((header, tensors))
}

/// Copies decoded tensors into a model's parameter slots, checking names and shapes.
pub(crate) fn restore(
    expected: &[TensorRef<'_>],
    header: &CheckpointHeader,
    tensors: Vec<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    if expected.len() != header.tensors.len() {
        return Err(Error::shape("checkpoint tensor count", expected.len(), header.tensors.len()));
    }
    for (e, info) in expected.iter().zip(&header.tensors) {
        if e.name != info.name || e.shape != info.shape {
            return Err(Error::validation(
                "checkpoint tensors",
                format!("expected {} {:?}, found {} {:?}", e.name, e.shape, info.name, info.shape),
            ));
        }
    }
    Ok(tensors)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}
