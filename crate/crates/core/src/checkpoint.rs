//! Named-tensor files used for parameters and optimizer state.
//!
//! Layout: `SEGT`, version `u16`, header length `u32`, a JSON header with
//! free-form metadata and the tensor manifest, then every tensor's entries as
//! little-endian `f64` in manifest order.
//!
//! A checkpoint directory holds `params.bin`, `train_state.bin` (pretraining
//! only) and `config.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{NamedTensors, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"SEGT";
const VERSION: u16 = 1;

pub const PARAMS_FILE: &str = "params.bin";
pub const TRAIN_STATE_FILE: &str = "train_state.bin";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: not a tensor file", .0.display())]
    BadMagic(PathBuf),
    #[error("{path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("{path}: bad header: {msg}")]
    BadHeader { path: PathBuf, msg: String },
    #[error("{}: truncated tensor data", .0.display())]
    Truncated(PathBuf),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_tensors<T: Scalar>(
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
    tensors: &[(String, &Matrix<T>)],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, m)| Entry {
                name: n.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = tensors.iter().map(|(_, m)| m.len()).sum();
    let mut buf = Vec::with_capacity(10 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, m) in tensors {
        for &x in &m.data {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_tensors<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(serde_json::Value, NamedTensors<T>), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| CheckpointError::Truncated(path.to_path_buf()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CheckpointError::BadHeader {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut off = 10 + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.rows * e.cols;
        let raw = bytes
            .get(off..off + 8 * n)
            .ok_or_else(|| CheckpointError::Truncated(path.to_path_buf()))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((e.name, Matrix::from_vec(e.rows, e.cols, data)));
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(CheckpointError::BadHeader {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    Ok((header.meta, NamedTensors(out)))
}

/// Copies `src` into `dst` by name. Every tensor of `dst` must be present
/// with the same shape; extra tensors in `src` are an error unless
/// `allow_extra`.
pub fn load_into<T: Scalar, P: ParamSet<T>>(
    dst: &mut P,
    src: &NamedTensors<T>,
    allow_extra: bool,
) -> Result<(), CheckpointError> {
    let mut used = 0;
    for (name, m) in dst.params_mut() {
        let s = src
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if s.shape() != m.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: s.shape(),
                expected: m.shape(),
            });
        }
        m.data.copy_from_slice(&s.data);
        used += 1;
    }
    if !allow_extra && used != src.0.len() {
        let names: Vec<String> = dst.params().into_iter().map(|(n, _)| n).collect();
        let extra = src
            .0
            .iter()
            .find(|(n, _)| !names.contains(n))
            .map(|(n, _)| n.clone())
            .unwrap_or_default();
        return Err(CheckpointError::UnexpectedTensor(extra));
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CheckpointError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String, CheckpointError> {
    fs::read_to_string(path).map_err(io_err(path))
}
