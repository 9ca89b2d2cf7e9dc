//! Reference database and query annotations in the on-disk dataset layout:
//!
//! ```text
//! root/
//!   objects/<NNN_name>/view_<k>.png          template image, k = 1..K
//!   objects/<NNN_name>/view_<k>_mask.png     template mask (or view_<k>_mask.rle.json)
//!   objects/<NNN_name>/view_<k>_depth.png    optional, kept as a path
//!   objects/<NNN_name>/detail.png            the single detail image
//!   queries/<scene>/<image>.png
//!   queries/<scene>/<image>.anno.json
//!   profiles.json
//! ```
//!
//! The numeric prefix of an object directory is its instance id.

use crate::featio::write_atomic;
use crate::geom::{BoundingBox, GeomError, RasterMask};
use crate::profile::{profile_from_value, ObjectProfile, ProfileError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PROFILES_FILE: &str = "profiles.json";
pub const ANNOTATION_SUFFIX: &str = ".anno.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot read image: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("no instances found under {0}")]
    NoInstances(PathBuf),
    #[error("{path}: object directory name must start with a numeric instance id")]
    BadInstanceName { path: PathBuf },
    #[error("{path}: duplicate instance id {id}")]
    DuplicateInstance { path: PathBuf, id: u32 },
    #[error("{path}: no template views")]
    NoTemplates { path: PathBuf },
    #[error("{path}: views must be numbered 1..={count}, found {found:?}")]
    ViewNumbering {
        path: PathBuf,
        count: usize,
        found: Vec<u32>,
    },
    #[error("{path}: instance has {got} views, expected {expected} like the other instances")]
    RaggedViews {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}: missing mask (expected a _mask.png or _mask.rle.json sidecar)")]
    MissingMask { path: PathBuf },
    #[error("{path}: mask is {mask_w}x{mask_h} but the image is {img_w}x{img_h}")]
    MaskSize {
        path: PathBuf,
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeomError,
    },
    #[error("{path}: expression {expression_id} has empty text")]
    EmptyExpression { path: PathBuf, expression_id: u32 },
    #[error("{path}: expression {expression_id} targets unknown instance {instance_id}")]
    UnknownInstance {
        path: PathBuf,
        expression_id: u32,
        instance_id: u32,
    },
    #[error("{path}: duplicate expression id {expression_id}")]
    DuplicateExpression { path: PathBuf, expression_id: u32 },
    #[error("{path}: profile {index}: {source}")]
    Profile {
        path: PathBuf,
        index: String,
        #[source]
        source: ProfileError,
    },
    #[error("{path}: profile `{identifier}` names no known instance")]
    UnknownProfile { path: PathBuf, identifier: String },
    #[error("{path}: profiles must be a JSON array or object")]
    ProfileContainer { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRecord {
    pub instance_id: u32,
    pub view_index: u32,
    pub image_path: PathBuf,
    pub mask: RasterMask,
    pub depth_path: Option<PathBuf>,
    pub embedding_ref: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceInstance {
    pub instance_id: u32,
    pub name: String,
    pub templates: Vec<TemplateRecord>,
    pub detail_image_path: Option<PathBuf>,
    pub profile: Option<ObjectProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAnnotation {
    /// Image path relative to `root/queries`, with `/` separators. Used as the
    /// image key by every downstream artifact.
    pub query_image_path: String,
    pub image_width: u32,
    pub image_height: u32,
    pub expression_id: u32,
    pub expression_text: String,
    pub gt_instance_id: u32,
    pub gt_box: BoundingBox,
    pub gt_mask: Option<RasterMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    #[serde(rename = "N")]
    pub instances: usize,
    #[serde(rename = "K")]
    pub views: usize,
    pub queries: usize,
    pub annotations: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub instances: Vec<ReferenceInstance>,
    pub annotations: Vec<QueryAnnotation>,
    pub stats: DatasetStats,
}

impl Dataset {
    pub fn instance(&self, id: u32) -> Option<&ReferenceInstance> {
        self.instances
            .binary_search_by_key(&id, |i| i.instance_id)
            .ok()
            .map(|i| &self.instances[i])
    }

    /// Query images in sorted order.
    pub fn query_images(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .annotations
            .iter()
            .map(|a| a.query_image_path.as_str())
            .collect();
        set.into_iter().collect()
    }

    pub fn annotations_for<'a>(&'a self, image: &'a str) -> impl Iterator<Item = &'a QueryAnnotation> + 'a {
        self.annotations.iter().filter(move |a| a.query_image_path == image)
    }
}

/// On-disk annotation file, one per query image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub expressions: Vec<ExpressionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub expression_id: u32,
    pub text: String,
    pub instance_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RasterMask>,
}

pub fn image_dimensions(path: &Path) -> Result<(u32, u32), DatasetError> {
    image::image_dimensions(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

fn instance_id_of(name: &str) -> Option<u32> {
    let digits: String = name.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn load_mask(view_path: &Path, k: u32) -> Result<RasterMask, DatasetError> {
    let dir = view_path.parent().unwrap_or(Path::new("."));
    let rle = dir.join(format!("view_{k}_mask.rle.json"));
    if rle.exists() {
        return read_json(&rle);
    }
    let png = dir.join(format!("view_{k}_mask.png"));
    if png.exists() {
        let img = image::open(&png)
            .map_err(|e| DatasetError::Image {
                path: png.clone(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let dense: Vec<bool> = img.pixels().map(|p| p.0[0] > 0).collect();
        return RasterMask::from_dense(img.width(), img.height(), &dense)
            .map_err(|source| DatasetError::Geometry { path: png, source });
    }
    Err(DatasetError::MissingMask {
        path: view_path.to_path_buf(),
    })
}

fn load_instance(dir: &Path) -> Result<ReferenceInstance, DatasetError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let instance_id = instance_id_of(&name).ok_or_else(|| DatasetError::BadInstanceName {
        path: dir.to_path_buf(),
    })?;

    let mut views: Vec<(u32, PathBuf)> = Vec::new();
    for entry in sorted_entries(dir)? {
        let file = entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(k) = file
            .strip_prefix("view_")
            .and_then(|s| s.strip_suffix(".png"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            views.push((k, entry));
        }
    }
    views.sort_by_key(|(k, _)| *k);
    if views.is_empty() {
        return Err(DatasetError::NoTemplates {
            path: dir.to_path_buf(),
        });
    }
    let found: Vec<u32> = views.iter().map(|(k, _)| *k).collect();
    if found.iter().enumerate().any(|(i, &k)| k != i as u32 + 1) {
        return Err(DatasetError::ViewNumbering {
            path: dir.to_path_buf(),
            count: views.len(),
            found,
        });
    }

    let mut templates = Vec::with_capacity(views.len());
    for (k, path) in views {
        let (w, h) = image_dimensions(&path)?;
        let mask = load_mask(&path, k)?;
        if (mask.width(), mask.height()) != (w, h) {
            return Err(DatasetError::MaskSize {
                path,
                mask_w: mask.width(),
                mask_h: mask.height(),
                img_w: w,
                img_h: h,
            });
        }
        let depth = dir.join(format!("view_{k}_depth.png"));
        templates.push(TemplateRecord {
            instance_id,
            view_index: k,
            image_path: path,
            mask,
            depth_path: depth.exists().then_some(depth),
            embedding_ref: None,
        });
    }
    let detail = dir.join("detail.png");
    Ok(ReferenceInstance {
        instance_id,
        name,
        templates,
        detail_image_path: detail.exists().then_some(detail),
        profile: None,
    })
}

fn load_annotation_file(
    queries_dir: &Path,
    path: &Path,
    known: &BTreeSet<u32>,
) -> Result<Vec<QueryAnnotation>, DatasetError> {
    let file: AnnotationFile = read_json(path)?;
    let dir = path.parent().unwrap_or(queries_dir);
    let image_path = dir.join(&file.image);
    let (w, h) = image_dimensions(&image_path)?;
    if file.width.is_some_and(|fw| fw != w) || file.height.is_some_and(|fh| fh != h) {
        return Err(DatasetError::Image {
            path: image_path,
            reason: format!(
                "annotation says {}x{}, file is {w}x{h}",
                file.width.unwrap_or(w),
                file.height.unwrap_or(h)
            ),
        });
    }
    let rel = image_path
        .strip_prefix(queries_dir)
        .unwrap_or(&image_path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/");

    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(file.expressions.len());
    for e in file.expressions {
        if !seen.insert(e.expression_id) {
            return Err(DatasetError::DuplicateExpression {
                path: path.to_path_buf(),
                expression_id: e.expression_id,
            });
        }
        if e.text.trim().is_empty() {
            return Err(DatasetError::EmptyExpression {
                path: path.to_path_buf(),
                expression_id: e.expression_id,
            });
        }
        if !known.contains(&e.instance_id) {
            return Err(DatasetError::UnknownInstance {
                path: path.to_path_buf(),
                expression_id: e.expression_id,
                instance_id: e.instance_id,
            });
        }
        e.bbox.check_within(w, h).map_err(|source| DatasetError::Geometry {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(m) = &e.mask {
            if (m.width(), m.height()) != (w, h) {
                return Err(DatasetError::MaskSize {
                    path: path.to_path_buf(),
                    mask_w: m.width(),
                    mask_h: m.height(),
                    img_w: w,
                    img_h: h,
                });
            }
        }
        out.push(QueryAnnotation {
            query_image_path: rel.clone(),
            image_width: w,
            image_height: h,
            expression_id: e.expression_id,
            expression_text: e.text,
            gt_instance_id: e.instance_id,
            gt_box: e.bbox,
            gt_mask: e.mask,
        });
    }
    Ok(out)
}

fn collect_annotation_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    for entry in sorted_entries(dir)? {
        if entry.is_dir() {
            collect_annotation_files(&entry, out)?;
        } else if entry.to_string_lossy().ends_with(ANNOTATION_SUFFIX) {
            out.push(entry);
        }
    }
    Ok(())
}

/// Load and validate a dataset root. `profiles.json`, when present, is
/// attached to the instances.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let objects = root.join("objects");
    let mut instances: Vec<ReferenceInstance> = Vec::new();
    if objects.is_dir() {
        for dir in sorted_entries(&objects)? {
            if dir.is_dir() {
                instances.push(load_instance(&dir)?);
            }
        }
    }
    if instances.is_empty() {
        return Err(DatasetError::NoInstances(root.to_path_buf()));
    }
    instances.sort_by_key(|i| i.instance_id);
    for pair in instances.windows(2) {
        if pair[0].instance_id == pair[1].instance_id {
            return Err(DatasetError::DuplicateInstance {
                path: objects.join(&pair[1].name),
                id: pair[1].instance_id,
            });
        }
    }
    let k = instances[0].templates.len();
    if let Some(bad) = instances.iter().find(|i| i.templates.len() != k) {
        return Err(DatasetError::RaggedViews {
            path: objects.join(&bad.name),
            expected: k,
            got: bad.templates.len(),
        });
    }

    let known: BTreeSet<u32> = instances.iter().map(|i| i.instance_id).collect();
    let queries_dir = root.join("queries");
    let mut files = Vec::new();
    if queries_dir.is_dir() {
        collect_annotation_files(&queries_dir, &mut files)?;
    }
    let mut annotations = Vec::new();
    for f in &files {
        annotations.extend(load_annotation_file(&queries_dir, f, &known)?);
    }

    let profiles_path = root.join(PROFILES_FILE);
    if profiles_path.exists() {
        let mut profiles = load_profiles(&profiles_path, &instances)?;
        for inst in &mut instances {
            inst.profile = profiles.remove(&inst.instance_id);
        }
    }

    let stats = DatasetStats {
        instances: instances.len(),
        views: k,
        queries: files.len(),
        annotations: annotations.len(),
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        instances,
        annotations,
        stats,
    })
}

fn resolve_identifier(identifier: &str, instances: &[ReferenceInstance]) -> Option<u32> {
    if let Some(i) = instances.iter().find(|i| i.name == identifier) {
        return Some(i.instance_id);
    }
    let id = instance_id_of(identifier)?;
    instances.iter().any(|i| i.instance_id == id).then_some(id)
}

/// Read a profile file: either an array of self-identifying profiles or an
/// object keyed by instance name (or id).
pub fn load_profiles(
    path: &Path,
    instances: &[ReferenceInstance],
) -> Result<BTreeMap<u32, ObjectProfile>, DatasetError> {
    let value: Value = read_json(path)?;
    let parsed: Vec<ObjectProfile> = match &value {
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                profile_from_value(v, None).map_err(|source| DatasetError::Profile {
                    path: path.to_path_buf(),
                    index: i.to_string(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?,
        Value::Object(map) => map
            .iter()
            .map(|(key, v)| {
                profile_from_value(v, Some(key)).map_err(|source| DatasetError::Profile {
                    path: path.to_path_buf(),
                    index: key.clone(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?,
        _ => {
            return Err(DatasetError::ProfileContainer {
                path: path.to_path_buf(),
            })
        }
    };
    let mut out = BTreeMap::new();
    for p in parsed {
        let id = resolve_identifier(&p.identifier, instances).ok_or_else(|| DatasetError::UnknownProfile {
            path: path.to_path_buf(),
            identifier: p.identifier.clone(),
        })?;
        out.insert(id, p);
    }
    Ok(out)
}

/// Write profiles as a JSON array in instance-id order.
pub fn save_profiles(path: &Path, profiles: &BTreeMap<u32, ObjectProfile>) -> Result<(), DatasetError> {
    let arr = Value::Array(profiles.values().map(ObjectProfile::to_value).collect());
    let mut text = serde_json::to_string_pretty(&arr).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: u32, name: &str) -> ReferenceInstance {
        ReferenceInstance {
            instance_id: id,
            name: name.to_string(),
            templates: vec![],
            detail_image_path: None,
            profile: None,
        }
    }

    #[test]
    fn instance_ids_come_from_the_numeric_prefix() {
        assert_eq!(instance_id_of("005_dr_pepper"), Some(5));
        assert_eq!(instance_id_of("100"), Some(100));
        assert_eq!(instance_id_of("dr_pepper"), None);
    }

    #[test]
    fn empty_directory_has_no_instances() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::NoInstances(_)));
        assert!(err.to_string().contains("no instances found"));
    }

    #[test]
    fn keyed_and_named_profiles_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(
            &path,
            r#"{"001_red_box": {"shape":"box","name":"001_red_box","function":"f","summary":"s"},
                "2": {"shape":"can","filename":"002_blue_can","function":"f","summary":"s"}}"#,
        )
        .unwrap();
        let instances = [inst(1, "001_red_box"), inst(2, "002_blue_can")];
        let map = load_profiles(&path, &instances).unwrap();
        assert_eq!(map[&1].shape, "box");
        assert_eq!(map[&2].identifier, "002_blue_can");

        fs::write(&path, r#"[{"shape":"x","name":"077_ghost","function":"f","summary":"s"}]"#).unwrap();
        assert!(matches!(
            load_profiles(&path, &instances),
            Err(DatasetError::UnknownProfile { .. })
        ));
        fs::write(&path, "{}").unwrap();
        assert!(load_profiles(&path, &instances).unwrap().is_empty());
        fs::write(&path, "[{").unwrap();
        assert!(matches!(load_profiles(&path, &instances), Err(DatasetError::Json { .. })));
    }
}
