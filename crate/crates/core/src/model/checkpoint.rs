use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelHyperParams, ParamRole, ParamSet};
use crate::autodiff::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint metadata: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("blob {file} holds {actual} bytes, expected {expected}")]
    BlobSize {
        file: String,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Option<ParamRole>,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    seed: u64,
    hyper: ModelHyperParams,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_blob(dir: &Path, file: &str, t: &Tensor) -> Result<(), CheckpointError> {
    let mut bytes = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(io(&path))
}

fn read_blob(dir: &Path, e: &Entry) -> Result<Tensor, CheckpointError> {
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(io(&path))?;
    let n: usize = e.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(CheckpointError::BlobSize {
            file: e.file.clone(),
            expected: n * 8,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor {
        shape: e.shape.clone(),
        data,
    })
}

/// Write `params.json` plus one little-endian f64 blob per tensor.
pub fn save_checkpoint(model: &Model, seed: u64, dir: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut params = Vec::with_capacity(model.params.len());
    for ((name, role), t) in model
        .params
        .names
        .iter()
        .zip(&model.params.roles)
        .zip(&model.params.tensors)
    {
        let file = format!("{name}.f64");
        write_blob(dir, &file, t)?;
        params.push(Entry {
            name: name.clone(),
            role: Some(*role),
            shape: t.shape.clone(),
            file,
        });
    }
    let mut buffers = Vec::new();
    for (name, t) in [("ccg_base", &model.ccg_base), ("tsg_base", &model.tsg_base)] {
        let file = format!("buffer.{name}.f64");
        write_blob(dir, &file, t)?;
        buffers.push(Entry {
            name: name.into(),
            role: None,
            shape: t.shape.clone(),
            file,
        });
    }
    let meta = Meta {
        version: CHECKPOINT_VERSION,
        seed,
        hyper: model.hyper.clone(),
        params,
        buffers,
    };
    let path = dir.join("params.json");
    let json = serde_json::to_string_pretty(&meta).expect("serializable metadata");
    fs::write(&path, json).map_err(io(&path))
}

/// Inverse of [`save_checkpoint`]; returns the model and its seed.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, u64), CheckpointError> {
    let dir = dir.as_ref();
    let path = dir.join("params.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(meta.version));
    }
    meta.hyper
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut params = ParamSet::empty();
    for e in &meta.params {
        let role = e
            .role
            .ok_or_else(|| CheckpointError::Corrupt(format!("parameter {} has no role", e.name)))?;
        params.push(e.name.clone(), role, read_blob(dir, e)?);
    }
    let expected = ParamSet::init(&meta.hyper, 0);
    if expected.names != params.names
        || expected
            .tensors
            .iter()
            .zip(&params.tensors)
            .any(|(a, b)| a.shape != b.shape)
    {
        return Err(CheckpointError::Corrupt(
            "parameter layout does not match hyperparameters".into(),
        ));
    }
    let buffer = |name: &str| -> Result<Tensor, CheckpointError> {
        let e = meta
            .buffers
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing buffer {name}")))?;
        read_blob(dir, e)
    };
    let model = Model {
        hyper: meta.hyper.clone(),
        params,
        ccg_base: buffer("ccg_base")?,
        tsg_base: buffer("tsg_base")?,
    };
    Ok((model, meta.seed))
}
