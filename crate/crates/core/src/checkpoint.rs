//! Adapter checkpoints: a JSON header plus one f64 tensor per weight.
//!
//! ```text
//! <dir>/adapter.json
//! <dir>/w1.mrvgt  <dir>/b1.mrvgt  <dir>/w2.mrvgt  <dir>/b2.mrvgt
//! ```

use crate::adapter::{AdapterParams, TrainConfig};
use crate::featio::{read_tensor, write_atomic, write_tensor, FeatError, Tensor, TensorData};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const HEADER_FILE: &str = "adapter.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] FeatError),
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("{name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: &'static str,
        expected: Vec<u64>,
        found: Vec<u64>,
    },
    #[error("{0}: checkpoint weights must be stored as f64")]
    DType(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dim: usize,
    pub hidden: usize,
    pub alpha: f64,
    /// Training recipe that produced the weights.
    pub train: TrainConfig,
    pub loss_history: Vec<f64>,
}

const WEIGHTS: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.mrvgt"))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &AdapterParams,
    train: &TrainConfig,
    loss_history: &[f64],
) -> Result<CheckpointHeader, CheckpointError> {
    std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dim: params.dim(),
        hidden: params.hidden(),
        alpha: params.alpha,
        train: train.clone(),
        loss_history: loss_history.to_vec(),
    };
    let mats = [
        (params.w1.shape().to_vec(), params.w1.iter().copied().collect::<Vec<_>>()),
        (params.b1.shape().to_vec(), params.b1.to_vec()),
        (params.w2.shape().to_vec(), params.w2.iter().copied().collect()),
        (params.b2.shape().to_vec(), params.b2.to_vec()),
    ];
    for (name, (shape, data)) in WEIGHTS.iter().zip(mats) {
        let t = Tensor::new(shape.iter().map(|&d| d as u64).collect(), TensorData::F64(data))?;
        write_tensor(&tensor_path(dir, name), &t)?;
    }
    let path = dir.join(HEADER_FILE);
    let mut text = serde_json::to_string_pretty(&header).map_err(|source| CheckpointError::Json {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(header)
}

fn load_weight(dir: &Path, name: &'static str, expected: Vec<u64>) -> Result<Vec<f64>, CheckpointError> {
    let t = read_tensor(&tensor_path(dir, name))?;
    if t.shape != expected {
        return Err(CheckpointError::Shape {
            name,
            expected,
            found: t.shape,
        });
    }
    match t.data {
        TensorData::F64(v) => Ok(v),
        TensorData::F32(_) => Err(CheckpointError::DType(name)),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointHeader, AdapterParams), CheckpointError> {
    let path = dir.join(HEADER_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| CheckpointError::Io {
        path: path.clone(),
        source,
    })?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path, source })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    let (d, h) = (header.dim as u64, header.hidden as u64);
    let w1 = load_weight(dir, "w1", vec![h, d])?;
    let b1 = load_weight(dir, "b1", vec![h])?;
    let w2 = load_weight(dir, "w2", vec![d, h])?;
    let b2 = load_weight(dir, "b2", vec![d])?;
    let params = AdapterParams {
        w1: Array2::from_shape_vec((header.hidden, header.dim), w1).expect("shape checked"),
        b1: Array1::from_vec(b1),
        w2: Array2::from_shape_vec((header.dim, header.hidden), w2).expect("shape checked"),
        b2: Array1::from_vec(b2),
        alpha: header.alpha,
    };
    Ok((header, params))
}
