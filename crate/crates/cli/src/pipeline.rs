//! Pipeline stages. Each stage reads the previous stage's artifact from the
//! run directory and writes its own.

use crate::config::BackendSpec;
use anyhow::{anyhow, bail, Context, Result};
use mrvg_core::adapter::{train_adapter, AdapterParams, TrainConfig};
use mrvg_core::chat::{ChatBackend, FixtureBackend, HttpBackend};
use mrvg_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, HEADER_FILE};
use mrvg_core::describer::generate_profiles;
use mrvg_core::detector::{classify_proposals, nms, Detection, Proposal};
use mrvg_core::evalkit::{
    average_precision, evaluate_grounding, ApSummary, GroundTruthBox, GroundingPrediction, GroundingReport,
    ScoredBox, ThresholdRule,
};
use mrvg_core::featio::{
    build_template_bank, features_to_embedding, read_tensor, FeatureManifest, TemplateBank, MANIFEST_FILE,
};
use mrvg_core::matcher::{build_candidates, match_expressions, Expression, MatchError, MatchResult, Resolver, Strategy};
use mrvg_core::refdb::{load_dataset, save_profiles, Dataset, DatasetStats, PROFILES_FILE};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use thiserror::Error;

pub const ARTIFACT_VERSION: u32 = 1;
pub const ADAPTER_DIR: &str = "adapter";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const ABLATION_FILE: &str = "ablation.json";

pub fn matches_file(strategy: Strategy) -> String {
    format!("matches-{}.json", strategy_name(strategy))
}

pub fn report_file(strategy: Strategy) -> String {
    format!("report-{}.json", strategy_name(strategy))
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Joint => "joint",
        Strategy::Independent => "independent",
    }
}

/// An input produced by an earlier subcommand is missing.
#[derive(Debug, Error)]
#[error("{what} not found at {}; run `mrvg {producer}` first", path.display())]
pub struct MissingUpstream {
    pub what: &'static str,
    pub path: PathBuf,
    pub producer: &'static str,
}

/// The language-model backend could not deliver usable answers.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct BackendFailure(pub String);

fn require(path: PathBuf, what: &'static str, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(MissingUpstream { what, path, producer }.into())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---- run directories ----

/// `<root>/<unix seconds>-<seed>`, with a numeric suffix if that exists.
pub fn new_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{secs}-{seed}");
    let mut dir = root.join(&base);
    let mut n = 2;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Newest run by the timestamp prefix of its name.
pub fn latest_run_dir(root: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(root).ok()?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let name = p.file_name()?.to_string_lossy().into_owned();
            let stamp: u64 = name.split('-').next()?.parse().ok()?;
            Some(((stamp, name), p))
        })
        .max_by(|a, b| a.0.cmp(&b.0))
        .map(|(_, p)| p)
}

pub fn existing_run_dir(explicit: Option<PathBuf>, runs_root: &Path) -> Result<PathBuf> {
    match explicit {
        Some(dir) => require(dir, "run directory", "train-adapter"),
        None => latest_run_dir(runs_root).ok_or_else(|| {
            MissingUpstream {
                what: "run directory",
                path: runs_root.to_path_buf(),
                producer: "train-adapter",
            }
            .into()
        }),
    }
}

// ---- validate / manifest checks ----

#[derive(Debug, Clone, Serialize)]
pub struct ManifestCheck {
    pub templates: usize,
    pub queries: usize,
    pub proposals: usize,
    pub tensors: usize,
}

/// Open every tensor the manifest references and check its rank.
pub fn check_manifest(tensor_root: &Path) -> Result<(FeatureManifest, ManifestCheck)> {
    let path = require(tensor_root.join(MANIFEST_FILE), "feature manifest", "extract` or `mrvg synth")?;
    let manifest = FeatureManifest::load(tensor_root).with_context(|| format!("loading {}", path.display()))?;
    let mut tensors = 0;
    let mut open = |grid: Option<&Path>, emb: Option<&Path>, what: String| -> Result<()> {
        let (p, rank) = match (grid, emb) {
            (Some(g), _) => (g, 3),
            (None, Some(e)) => (e, 1),
            (None, None) => bail!("{what}: neither grid nor embedding given"),
        };
        let t = read_tensor(&tensor_root.join(p)).with_context(|| format!("{what}: {}", p.display()))?;
        if t.shape.len() != rank {
            bail!("{what}: {} has shape {:?}, expected rank {rank}", p.display(), t.shape);
        }
        tensors += 1;
        Ok(())
    };
    for t in &manifest.templates {
        open(
            t.grid.as_deref(),
            t.embedding.as_deref(),
            format!("template {} view {}", t.instance_id, t.view),
        )?;
    }
    let mut proposals = 0;
    for q in &manifest.queries {
        for (i, p) in q.proposals.iter().enumerate() {
            let what = format!("{} proposal {i}", q.image);
            open(p.grid.as_deref(), p.embedding.as_deref(), what.clone())?;
            if let Some(m) = &p.mask {
                let (w, h) = (p.bbox.w.round() as u32, p.bbox.h.round() as u32);
                if (m.width(), m.height()) != (w, h) {
                    bail!("{what}: mask is {}x{} but the box crop is {w}x{h}", m.width(), m.height());
                }
            }
            proposals += 1;
        }
    }
    let check = ManifestCheck {
        templates: manifest.templates.len(),
        queries: manifest.queries.len(),
        proposals,
        tensors,
    };
    Ok((manifest, check))
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateSummary {
    pub stats: DatasetStats,
    pub profiles: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<ManifestCheck>,
}

pub fn validate(dataset_root: &Path, tensor_root: &Path) -> Result<ValidateSummary> {
    let ds = load_dataset(dataset_root)?;
    let features = if tensor_root.join(MANIFEST_FILE).exists() {
        let (manifest, check) = check_manifest(tensor_root)?;
        build_template_bank(&ds.instances, &manifest, tensor_root)?;
        for image in ds.query_images() {
            if manifest.query(image).is_none() {
                bail!("query {image} has annotations but no entry in {}", MANIFEST_FILE);
            }
        }
        Some(check)
    } else {
        None
    };
    Ok(ValidateSummary {
        profiles: ds.instances.iter().filter(|i| i.profile.is_some()).count(),
        stats: ds.stats,
        features,
    })
}

// ---- extract ----

/// Run the feature extractor as `<bridge> extract --images .. --out ..
/// [--config ..]`, then verify what it wrote.
pub fn extract(bridge: &str, images: &Path, out: &Path, config: Option<&Path>) -> Result<ManifestCheck> {
    let mut words = bridge.split_whitespace();
    let program = words.next().ok_or_else(|| anyhow!("empty bridge command"))?;
    let mut cmd = Command::new(program);
    cmd.args(words).arg("extract").arg("--images").arg(images).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let status = cmd
        .status()
        .with_context(|| format!("starting feature extractor `{bridge}` (set MRVG_BRIDGE or --bridge)"))?;
    if !status.success() {
        bail!("feature extractor `{bridge}` failed with {status}");
    }
    Ok(check_manifest(out)?.1)
}

// ---- describe ----

pub fn describe(
    dataset_root: &Path,
    backend: &BackendSpec,
    model: &str,
    max_inflight: usize,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let ds = load_dataset(dataset_root)?;
    let backend = chat_backend(backend)?
        .ok_or_else(|| anyhow!("describe needs a language-model backend (http or fixtures:<dir>)"))?;
    let results = generate_profiles(&ds.instances, backend.as_ref(), model, max_inflight);
    let mut profiles = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(p) => {
                profiles.insert(id, p);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let path = out.map_or_else(|| dataset_root.join(PROFILES_FILE), Path::to_path_buf);
    save_profiles(&path, &profiles)?;
    if !failures.is_empty() {
        return Err(BackendFailure(format!(
            "{} of {} instances could not be described:\n  {}",
            failures.len(),
            ds.instances.len(),
            failures.join("\n  ")
        ))
        .into());
    }
    Ok(path)
}

fn chat_backend(backend: &BackendSpec) -> Result<Option<Box<dyn ChatBackend>>> {
    Ok(match backend {
        BackendSpec::Http => Some(Box::new(HttpBackend::from_env()?)),
        BackendSpec::Fixtures(dir) => {
            require(dir.clone(), "fixture directory", "synth")?;
            Some(Box::new(FixtureBackend::new(dir)))
        }
        BackendSpec::Heuristic => None,
    })
}

// ---- train-adapter ----

fn template_bank(dataset_root: &Path, tensor_root: &Path) -> Result<(Dataset, FeatureManifest, TemplateBank)> {
    let ds = load_dataset(dataset_root)?;
    require(tensor_root.join(MANIFEST_FILE), "feature manifest", "extract` or `mrvg synth")?;
    let manifest = FeatureManifest::load(tensor_root)?;
    let bank = build_template_bank(&ds.instances, &manifest, tensor_root)?;
    Ok((ds, manifest, bank))
}

pub fn train(dataset_root: &Path, tensor_root: &Path, run_dir: &Path, cfg: &TrainConfig) -> Result<CheckpointHeader> {
    let (_, _, bank) = template_bank(dataset_root, tensor_root)?;
    let out = train_adapter(&bank, cfg)?;
    Ok(save_checkpoint(&run_dir.join(ADAPTER_DIR), &out.params, cfg, &out.loss_history)?)
}

pub fn load_adapter(run_dir: &Path) -> Result<(CheckpointHeader, AdapterParams)> {
    let dir = run_dir.join(ADAPTER_DIR);
    require(dir.join(HEADER_FILE), "adapter checkpoint", "train-adapter")?;
    Ok(load_checkpoint(&dir)?)
}

// ---- detect ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsArtifact {
    pub version: u32,
    /// False when detection ran on raw embeddings.
    pub adapter: bool,
    pub alpha: f64,
    pub sim_threshold: f64,
    pub nms_iou: f64,
    pub images: Vec<ImageDetections>,
}

impl DetectionsArtifact {
    pub fn image(&self, image: &str) -> Option<&ImageDetections> {
        self.images.iter().find(|d| d.image == image)
    }
}

fn detect_all(
    manifest: &FeatureManifest,
    tensor_root: &Path,
    bank: &TemplateBank,
    params: &AdapterParams,
    sim_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<ImageDetections>> {
    let mut images = Vec::with_capacity(manifest.queries.len());
    for q in &manifest.queries {
        let mut proposals = Vec::with_capacity(q.proposals.len());
        for p in &q.proposals {
            let pooled = features_to_embedding(tensor_root, p.grid.as_deref(), p.embedding.as_deref(), p.mask.as_ref())
                .with_context(|| format!("features for a proposal of {}", q.image))?;
            proposals.push(Proposal {
                bbox: p.bbox,
                mask: p.mask.clone(),
                embedding: pooled.embedding,
                objectness: p.objectness,
            });
        }
        let kept = classify_proposals(&proposals, bank, params, sim_threshold)?;
        images.push(ImageDetections {
            image: q.image.clone(),
            detections: nms(&kept, nms_iou),
        });
    }
    Ok(images)
}

/// `params = None` runs on raw embeddings (no adapter).
pub fn detect(
    dataset_root: &Path,
    tensor_root: &Path,
    run_dir: &Path,
    params: Option<&AdapterParams>,
    sim_threshold: f64,
    nms_iou: f64,
) -> Result<DetectionsArtifact> {
    let (_, manifest, bank) = template_bank(dataset_root, tensor_root)?;
    let identity = AdapterParams::passthrough(bank.dim());
    let p = params.unwrap_or(&identity);
    let artifact = DetectionsArtifact {
        version: ARTIFACT_VERSION,
        adapter: params.is_some(),
        alpha: p.alpha,
        sim_threshold,
        nms_iou,
        images: detect_all(&manifest, tensor_root, &bank, p, sim_threshold, nms_iou)?,
    };
    write_json(&run_dir.join(DETECTIONS_FILE), &artifact)?;
    Ok(artifact)
}

pub fn load_detections(run_dir: &Path) -> Result<DetectionsArtifact> {
    read_json(&require(run_dir.join(DETECTIONS_FILE), "detections", "detect")?)
}

// ---- ground ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image: String,
    pub matches: Vec<MatchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchesArtifact {
    pub version: u32,
    pub strategy: Strategy,
    pub backend: String,
    pub images: Vec<ImageMatches>,
}

pub fn ground(
    dataset_root: &Path,
    run_dir: &Path,
    backend: &BackendSpec,
    strategy: Strategy,
    model: &str,
    max_inflight: usize,
) -> Result<MatchesArtifact> {
    let detections = load_detections(run_dir)?;
    let ds = load_dataset(dataset_root)?;
    let profiles: BTreeMap<u32, _> = ds
        .instances
        .iter()
        .filter_map(|i| i.profile.clone().map(|p| (i.instance_id, p)))
        .collect();
    let chat = chat_backend(backend)?;
    let resolver = match &chat {
        None => Resolver::Heuristic,
        Some(b) => Resolver::Llm {
            backend: b.as_ref(),
            model: model.to_string(),
            max_inflight,
        },
    };

    let mut images = Vec::new();
    for image in ds.query_images() {
        let expressions: Vec<Expression> = ds
            .annotations_for(image)
            .map(|a| Expression {
                expression_id: a.expression_id,
                text: a.expression_text.clone(),
            })
            .collect();
        let dets = detections.image(image).map_or(&[][..], |d| d.detections.as_slice());
        let candidates = build_candidates(dets, &profiles).map_err(|e| match e {
            MatchError::MissingProfile(id) => anyhow!(MissingUpstream {
                what: "object profile",
                path: dataset_root.join(PROFILES_FILE),
                producer: "describe",
            })
            .context(format!("instance {id} was detected in {image}")),
            other => other.into(),
        })?;
        if candidates.is_empty() {
            log::warn!("{image}: no detections; its {} expression(s) stay unanswered", expressions.len());
            continue;
        }
        let matches = match_expressions(strategy, image, &candidates, &expressions, &resolver)?;
        images.push(ImageMatches {
            image: image.to_string(),
            matches,
        });
    }
    let artifact = MatchesArtifact {
        version: ARTIFACT_VERSION,
        strategy,
        backend: backend.label().to_string(),
        images,
    };
    write_json(&run_dir.join(matches_file(strategy)), &artifact)?;
    Ok(artifact)
}

// ---- eval ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub version: u32,
    pub strategy: Strategy,
    pub grounding: GroundingReport,
    /// Instance detection quality of `detections.json` against the annotated boxes.
    pub detection: ApSummary,
}

fn detection_ap(ds: &Dataset, detections: &[ImageDetections]) -> ApSummary {
    let scored: Vec<ScoredBox> = detections
        .iter()
        .flat_map(|img| {
            img.detections.iter().map(|d| ScoredBox {
                image: &img.image,
                category: d.instance_id,
                bbox: d.bbox,
                score: d.similarity,
            })
        })
        .collect();
    // several expressions may point at the same object
    let mut seen = BTreeSet::new();
    let truth: Vec<GroundTruthBox> = ds
        .annotations
        .iter()
        .filter(|a| {
            let b: [f64; 4] = a.gt_box.into();
            seen.insert((a.query_image_path.clone(), a.gt_instance_id, b.map(f64::to_bits)))
        })
        .map(|a| GroundTruthBox {
            image: &a.query_image_path,
            category: a.gt_instance_id,
            bbox: a.gt_box,
        })
        .collect();
    average_precision(&scored, &truth)
}

pub fn evaluate(dataset_root: &Path, run_dir: &Path, strategy: Strategy, rule: ThresholdRule) -> Result<ReportArtifact> {
    let matches: MatchesArtifact = read_json(&require(run_dir.join(matches_file(strategy)), "matches", "ground")?)?;
    let detections = load_detections(run_dir)?;
    let ds = load_dataset(dataset_root)?;
    let predictions: Vec<GroundingPrediction> = matches
        .images
        .iter()
        .flat_map(|img| {
            img.matches.iter().map(|m| GroundingPrediction {
                image: &img.image,
                expression_id: m.expression_id,
                bbox: m.bbox,
            })
        })
        .collect();
    let report = ReportArtifact {
        version: ARTIFACT_VERSION,
        strategy,
        grounding: evaluate_grounding(&predictions, &ds.annotations, rule),
        detection: detection_ap(&ds, &detections.images),
    };
    write_json(&run_dir.join(report_file(strategy)), &report)?;
    Ok(report)
}

// ---- ablate-epochs ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub epochs: usize,
    pub final_loss: f64,
    pub detection: ApSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArtifact {
    pub version: u32,
    pub train: TrainConfig,
    pub rows: Vec<AblationRow>,
}

/// Retrain for each epoch budget and score detection AP. Checkpoints land in
/// `<run>/ablation/epochs_<n>/`.
pub fn ablate_epochs(
    dataset_root: &Path,
    tensor_root: &Path,
    run_dir: &Path,
    base: &TrainConfig,
    epochs: &[usize],
    sim_threshold: f64,
    nms_iou: f64,
) -> Result<AblationArtifact> {
    if epochs.is_empty() {
        bail!("no epoch counts given");
    }
    let (ds, manifest, bank) = template_bank(dataset_root, tensor_root)?;
    let mut rows = Vec::with_capacity(epochs.len());
    for &n in epochs {
        let cfg = TrainConfig {
            epochs: n,
            ..base.clone()
        };
        let out = train_adapter(&bank, &cfg)?;
        save_checkpoint(
            &run_dir.join("ablation").join(format!("epochs_{n}")),
            &out.params,
            &cfg,
            &out.loss_history,
        )?;
        let dets = detect_all(&manifest, tensor_root, &bank, &out.params, sim_threshold, nms_iou)?;
        rows.push(AblationRow {
            epochs: n,
            final_loss: *out.loss_history.last().expect("epochs > 0"),
            detection: detection_ap(&ds, &dets),
        });
    }
    let artifact = AblationArtifact {
        version: ARTIFACT_VERSION,
        train: base.clone(),
        rows,
    };
    write_json(&run_dir.join(ABLATION_FILE), &artifact)?;
    Ok(artifact)
}
