//! Seeded synthetic datasets with known ground truth.
//!
//! Embeddings are the ground truth here; images are flat placeholders that
//! only exist so the dataset layout validates.

use crate::featio::{
    write_tensor, Embedding, FeatError, FeatureManifest, PatchGrid, ProposalFeatures, QueryFeatures,
    TemplateBank, TemplateFeatures, FORMAT_VERSION,
};
use crate::geom::{BoundingBox, RasterMask};
use crate::matcher::fixture_key;
use crate::profile::{ColorEntry, ObjectProfile, TextEntry};
use crate::refdb::{save_profiles, AnnotationFile, DatasetError, ExpressionRecord, PROFILES_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CANVAS_WIDTH: u32 = 640;
pub const CANVAS_HEIGHT: u32 = 480;
pub const TEMPLATE_SIZE: u32 = 28;
const PLACEMENT_RETRIES: usize = 1000;

const COLORS: [&str; 24] = [
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray", "cyan",
    "magenta", "teal", "navy", "maroon", "olive", "beige", "gold", "silver", "lime", "coral", "indigo", "violet",
];
const SHAPES: [&str; 6] = ["bottle", "box", "can", "bag", "jar", "tube"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("scene {scene}: could not place {count} non-overlapping boxes after {retries} tries")]
    Placement { scene: usize, count: usize, retries: usize },
    #[error(transparent)]
    Feature(#[from] FeatError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_instances: usize,
    pub k_views: usize,
    pub dim: usize,
    /// Per-coordinate std of template noise around each center.
    pub cluster_sigma: f64,
    pub scene_count: usize,
    pub proposals_per_scene: usize,
    /// Chance that a proposal slot holds clutter instead of an instance.
    pub distractor_rate: f64,
    /// Per-coordinate std of proposal noise around each center.
    pub proposal_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 8,
            k_views: 4,
            dim: 32,
            cluster_sigma: 0.05,
            scene_count: 4,
            proposals_per_scene: 4,
            distractor_rate: 0.0,
            proposal_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.n_instances < 2 {
            return bad("n_instances must be at least 2");
        }
        if self.k_views == 0 {
            return bad("k_views must be at least 1");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(self.cluster_sigma >= 0.0 && self.cluster_sigma.is_finite()) {
            return bad("cluster_sigma must be finite and >= 0");
        }
        if !(self.proposal_sigma >= 0.0 && self.proposal_sigma.is_finite()) {
            return bad("proposal_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must be in [0, 1]");
        }
        if self.proposals_per_scene == 0 || self.proposals_per_scene > self.n_instances {
            return bad("proposals_per_scene must be in 1..=n_instances");
        }
        Ok(())
    }
}

/// Instance ids run `1..=n_instances`; `centers[i]` belongs to id `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBank {
    pub bank: TemplateBank,
    pub centers: Vec<Embedding>,
}

impl SynthBank {
    pub fn center(&self, instance_id: u32) -> &Embedding {
        &self.centers[instance_id as usize - 1]
    }
}

fn gaussian(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// `center + N(0, sigma^2 I)`, renormalized.
pub fn noisy_sample(center: &Embedding, sigma: f64, rng: &mut impl Rng) -> Embedding {
    if sigma == 0.0 {
        return center.clone();
    }
    let noise = gaussian(rng, center.dim(), sigma);
    Embedding::raw(unit(center.values.iter().zip(noise).map(|(c, n)| c + n).collect()))
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Embedding {
    loop {
        let v = gaussian(rng, dim, 1.0);
        if v.iter().any(|x| *x != 0.0) {
            return Embedding::raw(unit(v));
        }
    }
}

pub fn gen_bank(cfg: &SynthConfig) -> Result<SynthBank, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Embedding> = (0..cfg.n_instances).map(|_| random_unit(cfg.dim, &mut rng)).collect();
    let mut entries = Vec::with_capacity(cfg.n_instances * cfg.k_views);
    for (i, c) in centers.iter().enumerate() {
        for k in 0..cfg.k_views {
            entries.push((i as u32 + 1, k as u32 + 1, noisy_sample(c, cfg.cluster_sigma, &mut rng)));
        }
    }
    Ok(SynthBank {
        bank: TemplateBank::from_entries(entries)?,
        centers,
    })
}

pub fn color_of(instance_id: u32) -> String {
    let i = instance_id as usize - 1;
    match i / COLORS.len() {
        0 => COLORS[i % COLORS.len()].to_string(),
        round => format!("{}{}", COLORS[i % COLORS.len()], round + 1),
    }
}

pub fn shape_of(instance_id: u32) -> &'static str {
    SHAPES[(instance_id as usize - 1) % SHAPES.len()]
}

pub fn instance_name(instance_id: u32) -> String {
    format!("{instance_id:03}_{}_{}", color_of(instance_id), shape_of(instance_id))
}

/// Each instance gets a unique color and brand token, so "the <color>
/// <shape>" names exactly one instance.
pub fn synth_profile(instance_id: u32) -> ObjectProfile {
    let (color, shape) = (color_of(instance_id), shape_of(instance_id));
    ObjectProfile::new(
        instance_name(instance_id),
        shape,
        vec![ColorEntry {
            description: format!("the main color of the {shape}"),
            color: color.clone(),
        }],
        vec![TextEntry::new(format!("BRAND{instance_id}"), "on the front", None)],
        format!("A synthetic {shape}."),
        format!("A {color} {shape} labelled BRAND{instance_id}."),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthProposal {
    pub bbox: BoundingBox,
    /// `None` for clutter.
    pub instance_id: Option<u32>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthExpression {
    pub expression_id: u32,
    pub text: String,
    pub instance_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub index: usize,
    /// Query path relative to `queries/`.
    pub image: String,
    pub proposals: Vec<SynthProposal>,
    pub expressions: Vec<SynthExpression>,
}

impl SynthScene {
    /// Instance proposals in candidate order: sorted by the box's top-left
    /// `(x, y)`, numbered from 1.
    pub fn items(&self) -> Vec<(u32, &SynthProposal)> {
        let mut real: Vec<&SynthProposal> = self.proposals.iter().filter(|p| p.instance_id.is_some()).collect();
        real.sort_by(|a, b| a.bbox.x.total_cmp(&b.bbox.x).then(a.bbox.y.total_cmp(&b.bbox.y)));
        real.into_iter().enumerate().map(|(i, p)| (i as u32 + 1, p)).collect()
    }

    pub fn gt_box(&self, instance_id: u32) -> BoundingBox {
        self.proposals
            .iter()
            .find(|p| p.instance_id == Some(instance_id))
            .map(|p| p.bbox)
            .expect("expressions only target placed instances")
    }
}

fn place_boxes(rng: &mut impl Rng, count: usize, scene: usize) -> Result<Vec<BoundingBox>, SynthError> {
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(count);
    let mut tries = 0;
    while boxes.len() < count {
        tries += 1;
        if tries > PLACEMENT_RETRIES * count {
            return Err(SynthError::Placement {
                scene,
                count,
                retries: PLACEMENT_RETRIES * count,
            });
        }
        let w = rng.random_range(40..=120u32);
        let h = rng.random_range(60..=160u32);
        let x = rng.random_range(0..=CANVAS_WIDTH - w);
        let y = rng.random_range(0..=CANVAS_HEIGHT - h);
        let b = BoundingBox::new(x as f64, y as f64, w as f64, h as f64).expect("positive size");
        if boxes.iter().all(|o| o.intersection_area(&b) == 0.0) {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One query scene. Slot 0 always holds an instance; other slots become
/// clutter with probability `distractor_rate`. Every placed instance gets
/// one expression.
pub fn gen_scene(cfg: &SynthConfig, bank: &SynthBank, index: usize) -> Result<SynthScene, SynthError> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let mut ids: Vec<u32> = (1..=cfg.n_instances as u32).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let boxes = place_boxes(&mut rng, cfg.proposals_per_scene, index)?;
    let mut proposals = Vec::with_capacity(boxes.len());
    for (slot, bbox) in boxes.into_iter().enumerate() {
        let clutter = slot > 0 && rng.random_bool(cfg.distractor_rate);
        proposals.push(if clutter {
            SynthProposal {
                bbox,
                instance_id: None,
                embedding: random_unit(cfg.dim, &mut rng),
            }
        } else {
            let id = ids[slot];
            SynthProposal {
                bbox,
                instance_id: Some(id),
                embedding: noisy_sample(bank.center(id), cfg.proposal_sigma, &mut rng),
            }
        });
    }

    let mut scene = SynthScene {
        index,
        image: format!("scene_{index:03}/query.png"),
        proposals,
        expressions: Vec::new(),
    };
    let items = scene.items();
    let mut expressions = Vec::new();
    for (item, p) in &items {
        let id = p.instance_id.expect("items are instances");
        let shape = shape_of(id);
        // first in candidate order among same-shaped items is the leftmost
        let leftmost = items
            .iter()
            .find(|(_, q)| shape_of(q.instance_id.unwrap()) == shape)
            .is_some_and(|(first, _)| first == item);
        let text = if leftmost && rng.random_bool(0.5) {
            format!("the leftmost {shape}")
        } else {
            format!("the {} {shape}", color_of(id))
        };
        expressions.push(SynthExpression {
            expression_id: expressions.len() as u32 + 1,
            text,
            instance_id: id,
        });
    }
    scene.expressions = expressions;
    Ok(scene)
}

/// Ground truth `expression_id -> item_id` under the scene's candidate
/// numbering.
pub fn oracle_assignments(scene: &SynthScene) -> BTreeMap<u32, u32> {
    let item_of: BTreeMap<u32, u32> = scene
        .items()
        .into_iter()
        .map(|(item, p)| (p.instance_id.unwrap(), item))
        .collect();
    scene
        .expressions
        .iter()
        .map(|e| (e.expression_id, item_of[&e.instance_id]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub tensor_root: PathBuf,
    pub instances: usize,
    pub views: usize,
    pub scenes: usize,
    pub expressions: usize,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn mkdir(path: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(path).map_err(io(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), SynthError> {
    std::fs::write(path, text).map_err(io(path))
}

fn write_placeholder_png(path: &Path, width: u32, height: u32, shade: u8) -> Result<(), SynthError> {
    image::GrayImage::from_pixel(width, height, image::Luma([shade]))
        .save(path)
        .map_err(|e| SynthError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// A 2x2 patch grid whose left column holds `e` and whose right column is
/// noise. Pooling it under a left-half mask gives back `e`.
fn grid_for(e: &Embedding, rng: &mut impl Rng) -> PatchGrid {
    let dim = e.dim();
    let mut data = Vec::with_capacity(4 * dim);
    for _row in 0..2 {
        data.extend(e.values.iter().map(|&v| v as f32));
        data.extend(gaussian(rng, dim, 1.0).into_iter().map(|v| v as f32));
    }
    PatchGrid::new(2, 2, dim, data).expect("consistent grid shape")
}

fn left_half(width: u32, height: u32) -> RasterMask {
    RasterMask::rect(width, height, 0, 0, width.div_ceil(2), height)
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

/// Write a complete dataset root plus a feature manifest in
/// `<root>/features`. Also records replayable backend answers under
/// `<root>/fixtures/`: `describe/` holds each instance's profile and `match/`
/// holds oracle matching answers.
pub fn write_dataset(cfg: &SynthConfig, root: &Path) -> Result<SynthSummary, SynthError> {
    let bank = gen_bank(cfg)?;
    let scenes = (0..cfg.scene_count)
        .map(|i| gen_scene(cfg, &bank, i))
        .collect::<Result<Vec<_>, _>>()?;

    let tensor_root = root.join("features");
    let describe_dir = root.join("fixtures").join("describe");
    let match_dir = root.join("fixtures").join("match");
    for d in [&tensor_root.join("templates"), &tensor_root.join("proposals"), &describe_dir, &match_dir] {
        mkdir(d)?;
    }
    let mut grid_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_6A1D);

    let mut templates = Vec::new();
    let mut profiles = BTreeMap::new();
    for (id, view, e) in bank.bank.iter() {
        let name = instance_name(id);
        let dir = root.join("objects").join(&name);
        if view == 1 {
            mkdir(&dir)?;
            write_placeholder_png(&dir.join("detail.png"), 64, 64, 200)?;
            let profile = synth_profile(id);
            write_text(&describe_dir.join(format!("{name}.json")), &pretty(&profile.to_value()))?;
            profiles.insert(id, profile);
        }
        write_placeholder_png(&dir.join(format!("view_{view}.png")), TEMPLATE_SIZE, TEMPLATE_SIZE, 128)?;
        write_text(
            &dir.join(format!("view_{view}_mask.rle.json")),
            &pretty(&left_half(TEMPLATE_SIZE, TEMPLATE_SIZE)),
        )?;
        let rel = PathBuf::from("templates").join(format!("{id:03}_v{view}.mrvgt"));
        write_tensor(&tensor_root.join(&rel), &grid_for(e, &mut grid_rng).to_tensor())?;
        templates.push(TemplateFeatures {
            instance_id: id,
            view,
            grid: Some(rel),
            embedding: None,
        });
    }
    save_profiles(&root.join(PROFILES_FILE), &profiles)?;

    let mut queries = Vec::new();
    let mut expression_count = 0;
    for scene in &scenes {
        let scene_dir = root.join("queries").join(format!("scene_{:03}", scene.index));
        mkdir(&scene_dir)?;
        write_placeholder_png(&scene_dir.join("query.png"), CANVAS_WIDTH, CANVAS_HEIGHT, 90)?;
        let records: Vec<ExpressionRecord> = scene
            .expressions
            .iter()
            .map(|e| ExpressionRecord {
                expression_id: e.expression_id,
                text: e.text.clone(),
                instance_id: e.instance_id,
                bbox: scene.gt_box(e.instance_id),
                mask: None,
            })
            .collect();
        expression_count += records.len();
        let anno = AnnotationFile {
            image: "query.png".into(),
            width: Some(CANVAS_WIDTH),
            height: Some(CANVAS_HEIGHT),
            expressions: records,
        };
        write_text(&scene_dir.join("query.anno.json"), &pretty(&anno))?;

        let mut proposals = Vec::new();
        for (j, p) in scene.proposals.iter().enumerate() {
            let rel = PathBuf::from("proposals").join(format!("scene_{:03}_p{j}.mrvgt", scene.index));
            write_tensor(&tensor_root.join(&rel), &grid_for(&p.embedding, &mut grid_rng).to_tensor())?;
            proposals.push(ProposalFeatures {
                bbox: p.bbox,
                objectness: 1.0,
                mask: Some(left_half(p.bbox.w as u32, p.bbox.h as u32)),
                grid: Some(rel),
                embedding: None,
            });
        }
        queries.push(QueryFeatures {
            image: scene.image.clone(),
            proposals,
        });

        let oracle = oracle_assignments(scene);
        let key = fixture_key(&scene.image);
        let matches: Vec<_> = oracle
            .iter()
            .map(|(inquiry, item)| json!({"inquiry_id": inquiry, "item_id": item}))
            .collect();
        write_text(
            &match_dir.join(format!("{key}__joint.json")),
            &pretty(&json!({ "matches": matches })),
        )?;
        for (expr, item) in &oracle {
            write_text(
                &match_dir.join(format!("{key}__expr{expr}.json")),
                &pretty(&json!({ "item_id": item })),
            )?;
        }
    }

    let mut metadata = serde_json::Map::new();
    metadata.insert("generator".into(), json!("synthgen"));
    metadata.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    FeatureManifest {
        version: FORMAT_VERSION,
        metadata,
        templates,
        queries,
    }
    .save(&tensor_root)?;

    Ok(SynthSummary {
        root: root.to_path_buf(),
        tensor_root,
        instances: cfg.n_instances,
        views: cfg.k_views,
        scenes: scenes.len(),
        expressions: expression_count,
    })
}
