//! Tensor interchange files, the feature manifest, and foreground pooling of
//! backbone patch grids into instance embeddings.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `MRVG`                     |
//! | 4            | `u32` format version (= 1)       |
//! | 4            | `u32` dtype (0 = f32, 1 = f64)   |
//! | 4            | `u32` ndim                       |
//! | 8 * ndim     | `u64` dims                       |
//! | rest         | raw little-endian payload        |

use crate::geom::{BoundingBox, RasterMask};
use crate::refdb::ReferenceInstance;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MRVG";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "features.json";

/// A patch counts as foreground when strictly more than this fraction of its
/// pixels are foreground.
pub const FOREGROUND_COVERAGE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"MRVG\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor format version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    DType(u32),
    #[error("truncated tensor file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    ShapeMismatch {
        shape: Vec<u64>,
        expected: u64,
        got: u64,
    },
    #[error("patch grid is empty")]
    EmptyGrid,
    #[error("patch grid has zero feature dimension")]
    ZeroDim,
    #[error("patch grid holds a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("expected a tensor of rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<u64> },
    #[error("no features for instance {instance_id} view {view}")]
    MissingTemplate { instance_id: u32, view: u32 },
    #[error("embedding dims disagree: {0} vs {1}")]
    MixedDims(usize, usize),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest entry has neither `grid` nor `embedding`")]
    NoFeatures,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatError + '_ {
    move |source| FeatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u32 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, data: TensorData) -> Result<Self, FeatError> {
        let expected: u64 = shape.iter().product();
        if expected != data.len() as u64 {
            return Err(FeatError::ShapeMismatch {
                shape,
                expected,
                got: data.len() as u64,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn header_len(ndim: usize) -> usize {
        16 + 8 * ndim
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = match self.data {
            TensorData::F32(_) => 4,
            TensorData::F64(_) => 8,
        };
        let mut out = Vec::with_capacity(Self::header_len(self.shape.len()) + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.data.dtype().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatError> {
        let need = |needed: u64| {
            if (bytes.len() as u64) < needed {
                Err(FeatError::Truncated {
                    needed,
                    available: bytes.len() as u64,
                })
            } else {
                Ok(())
            }
        };
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());

        need(16)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(FeatError::BadMagic { found: magic });
        }
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(FeatError::Version(version));
        }
        let dtype = u32_at(8);
        let width: u64 = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(FeatError::DType(other)),
        };
        let ndim = u32_at(12) as usize;
        need(Self::header_len(ndim) as u64)?;
        let shape: Vec<u64> = (0..ndim)
            .map(|i| u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().unwrap()))
            .collect();
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FeatError::ShapeMismatch {
                shape: shape.clone(),
                expected: u64::MAX,
                got: 0,
            })?;
        let start = Self::header_len(ndim) as u64;
        let payload_len = count.checked_mul(width).ok_or(FeatError::Truncated {
            needed: u64::MAX,
            available: bytes.len() as u64,
        })?;
        need(start + payload_len)?;
        let available = bytes.len() as u64 - start;
        if available != payload_len {
            return Err(FeatError::ShapeMismatch {
                shape,
                expected: count,
                got: available / width,
            });
        }
        let payload = &bytes[start as usize..];
        let data = if dtype == 0 {
            TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        Ok(Self { shape, data })
    }
}

/// Write a tensor file atomically (temporary file in the same directory,
/// then rename).
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), FeatError> {
    write_atomic(path, &tensor.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FeatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Tensor::from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FeatError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| FeatError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Raw backbone features for one image region, row-major `rows x cols x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self, FeatError> {
        if dim == 0 {
            return Err(FeatError::ZeroDim);
        }
        if rows == 0 || cols == 0 {
            return Err(FeatError::EmptyGrid);
        }
        if data.len() != rows * cols * dim {
            return Err(FeatError::ShapeMismatch {
                shape: vec![rows as u64, cols as u64, dim as u64],
                expected: (rows * cols * dim) as u64,
                got: data.len() as u64,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatError::NonFinite(i));
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, FeatError> {
        if t.shape.len() != 3 {
            return Err(FeatError::Rank {
                expected: 3,
                shape: t.shape.clone(),
            });
        }
        let data = match &t.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Self::new(t.shape[0] as usize, t.shape[1] as usize, t.shape[2] as usize, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows as u64, self.cols as u64, self.dim as u64],
            data: TensorData::F32(self.data.clone()),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, r: usize, c: usize) -> &[f32] {
        let at = (r * self.cols + c) * self.dim;
        &self.data[at..at + self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Adapted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub stage: Stage,
}

impl Embedding {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            stage: Stage::Raw,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            stage: self.stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub embedding: Embedding,
    /// No patch reached majority coverage; the embedding is the mean of all patches.
    pub fallback: bool,
}

/// Mean of the patch vectors whose cell is majority foreground.
///
/// Pixel `(px, py)` of the mask belongs to cell
/// `(py * rows / height, px * cols / width)`.
pub fn pool_foreground(grid: &PatchGrid, mask: &RasterMask) -> Result<Pooled, FeatError> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut fg = vec![0u64; grid.rows * grid.cols];
    let mut total = vec![0u64; grid.rows * grid.cols];
    let col_of: Vec<usize> = (0..w).map(|px| px * grid.cols / w).collect();
    for py in 0..h {
        let r = py * grid.rows / h;
        for &c in &col_of {
            total[r * grid.cols + c] += 1;
        }
    }
    for &(start, len) in mask.runs() {
        for idx in start..start + len {
            let (py, px) = (idx as usize / w, idx as usize % w);
            let r = py * grid.rows / h;
            fg[r * grid.cols + col_of[px]] += 1;
        }
    }

    let selected: Vec<(usize, usize)> = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            let i = r * grid.cols + c;
            total[i] > 0 && fg[i] as f64 > FOREGROUND_COVERAGE * total[i] as f64
        })
        .collect();

    if selected.is_empty() {
        return Ok(Pooled {
            embedding: mean_all(grid),
            fallback: true,
        });
    }
    let mut acc = vec![0.0f64; grid.dim];
    for &(r, c) in &selected {
        for (a, &v) in acc.iter_mut().zip(grid.patch(r, c)) {
            *a += v as f64;
        }
    }
    let n = selected.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Pooled {
        embedding: Embedding::raw(acc),
        fallback: false,
    })
}

pub fn mean_all(grid: &PatchGrid) -> Embedding {
    let mut acc = vec![0.0f64; grid.dim];
    for patch in grid.data.chunks_exact(grid.dim) {
        for (a, &v) in acc.iter_mut().zip(patch) {
            *a += v as f64;
        }
    }
    let n = (grid.rows * grid.cols) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Embedding::raw(acc)
}

/// Per-template entry in the feature manifest. Exactly one of `grid`
/// (a `rows x cols x dim` patch grid) or `embedding` (a pre-pooled `[dim]`
/// vector) is expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateFeatures {
    pub instance_id: u32,
    pub view: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
}

/// A class-agnostic region proposal. The mask, when present, covers the box
/// crop (its extent is `w x h` of the crop the grid was computed on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFeatures {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default = "one")]
    pub objectness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RasterMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub image: String,
    pub proposals: Vec<ProposalFeatures>,
}

/// `features.json`: everything the extractor hands to the core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub templates: Vec<TemplateFeatures>,
    pub queries: Vec<QueryFeatures>,
}

impl FeatureManifest {
    /// Load `features.json` from a tensor root.
    pub fn load(tensor_root: &Path) -> Result<Self, FeatError> {
        let path = tensor_root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| FeatError::Manifest { path, source })
    }

    pub fn save(&self, tensor_root: &Path) -> Result<(), FeatError> {
        let path = tensor_root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| FeatError::Manifest {
            path: path.clone(),
            source,
        })?;
        write_atomic(&path, text.as_bytes())
    }

    pub fn query(&self, image: &str) -> Option<&QueryFeatures> {
        self.queries.iter().find(|q| q.image == image)
    }
}

fn load_embedding(path: &Path) -> Result<Embedding, FeatError> {
    let t = read_tensor(path)?;
    if t.shape.len() != 1 {
        return Err(FeatError::Rank {
            expected: 1,
            shape: t.shape,
        });
    }
    Ok(Embedding::raw(t.data.to_f64()))
}

/// Resolve a manifest entry into an embedding, pooling under `mask` when a
/// grid is given (no mask means the whole grid is foreground).
pub fn features_to_embedding(
    tensor_root: &Path,
    grid: Option<&Path>,
    embedding: Option<&Path>,
    mask: Option<&RasterMask>,
) -> Result<Pooled, FeatError> {
    match (grid, embedding) {
        (Some(g), _) => {
            let grid = PatchGrid::from_tensor(&read_tensor(&tensor_root.join(g))?)?;
            match mask {
                Some(m) => pool_foreground(&grid, m),
                None => Ok(Pooled {
                    embedding: mean_all(&grid),
                    fallback: false,
                }),
            }
        }
        (None, Some(e)) => Ok(Pooled {
            embedding: load_embedding(&tensor_root.join(e))?,
            fallback: false,
        }),
        (None, None) => Err(FeatError::NoFeatures),
    }
}

/// Raw template embeddings for all `N x K` reference views.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    dim: usize,
    /// Sorted by instance id; views sorted by view index.
    instances: BTreeMap<u32, Vec<(u32, Embedding)>>,
}

impl TemplateBank {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (u32, u32, Embedding)>,
    ) -> Result<Self, FeatError> {
        let mut dim = None;
        let mut instances: BTreeMap<u32, Vec<(u32, Embedding)>> = BTreeMap::new();
        for (id, view, e) in entries {
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d != e.dim() => return Err(FeatError::MixedDims(d, e.dim())),
                _ => {}
            }
            instances.entry(id).or_default().push((view, e));
        }
        for views in instances.values_mut() {
            views.sort_by_key(|(v, _)| *v);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            instances,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn len(&self) -> usize {
        self.instances.values().map(Vec::len).sum()
    }

    pub fn instance_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.instances.keys().copied()
    }

    pub fn views(&self, instance_id: u32) -> Option<&[(u32, Embedding)]> {
        self.instances.get(&instance_id).map(Vec::as_slice)
    }

    pub fn get(&self, instance_id: u32, view: u32) -> Option<&Embedding> {
        self.views(instance_id)?
            .iter()
            .find(|(v, _)| *v == view)
            .map(|(_, e)| e)
    }

    /// `(instance_id, view, embedding)` in id then view order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, &Embedding)> {
        self.instances
            .iter()
            .flat_map(|(&id, views)| views.iter().map(move |(v, e)| (id, *v, e)))
    }
}

/// Pool every template of every instance. Each template uses its dataset
/// mask over the grid listed for it in the manifest.
pub fn build_template_bank(
    instances: &[ReferenceInstance],
    manifest: &FeatureManifest,
    tensor_root: &Path,
) -> Result<TemplateBank, FeatError> {
    let lookup: BTreeMap<(u32, u32), &TemplateFeatures> = manifest
        .templates
        .iter()
        .map(|t| ((t.instance_id, t.view), t))
        .collect();
    let mut entries = Vec::new();
    for inst in instances {
        for tpl in &inst.templates {
            let key = (inst.instance_id, tpl.view_index);
            let feat = lookup.get(&key).ok_or(FeatError::MissingTemplate {
                instance_id: key.0,
                view: key.1,
            })?;
            let pooled = features_to_embedding(
                tensor_root,
                feat.grid.as_deref(),
                feat.embedding.as_deref(),
                Some(&tpl.mask),
            )?;
            if pooled.fallback {
                log::warn!(
                    "instance {} view {}: no majority-foreground patch, using the full-grid mean",
                    key.0,
                    key.1
                );
            }
            entries.push((key.0, key.1, pooled.embedding));
        }
    }
    TemplateBank::from_entries(entries)
}
