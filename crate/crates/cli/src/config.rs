//! Pipeline configuration: command-line flag, then config file, then the
//! built-in default.

use anyhow::{bail, Context, Result};
use mrvg_core::adapter::TrainConfig;
use mrvg_core::detector::{DEFAULT_NMS_IOU, DEFAULT_SIM_THRESHOLD};
use mrvg_core::matcher::Strategy;
use mrvg_core::synthgen::SynthConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub const DEFAULT_DATASET: &str = "data";
pub const DEFAULT_RUNS_ROOT: &str = "runs";
pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_MAX_INFLIGHT: usize = 4;

/// Everything a config file may set. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    pub tensor_root: Option<PathBuf>,
    pub runs_root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub backend: Option<String>,
    pub strategy: Option<Strategy>,
    pub model: Option<String>,
    pub max_inflight: Option<usize>,
    pub sim_threshold: Option<f64>,
    pub nms_iou: Option<f64>,
    pub seed: Option<u64>,
    pub train: Option<TrainFile>,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn dataset_root(&self, flag: Option<&PathBuf>) -> PathBuf {
        pick(flag.cloned(), self.dataset_root.clone(), || PathBuf::from(DEFAULT_DATASET))
    }

    pub fn tensor_root(&self, flag: Option<&PathBuf>, dataset: &Path) -> PathBuf {
        pick(flag.cloned(), self.tensor_root.clone(), || dataset.join("features"))
    }

    pub fn runs_root(&self, flag: Option<&PathBuf>) -> PathBuf {
        pick(flag.cloned(), self.runs_root.clone(), || PathBuf::from(DEFAULT_RUNS_ROOT))
    }

    pub fn run_dir(&self, flag: Option<&PathBuf>) -> Option<PathBuf> {
        flag.cloned().or_else(|| self.run_dir.clone())
    }

    pub fn backend(&self, flag: Option<&str>) -> Result<BackendSpec> {
        BackendSpec::parse(flag.or(self.backend.as_deref()).unwrap_or("http"))
    }

    pub fn strategy(&self, flag: Option<Strategy>) -> Strategy {
        flag.or(self.strategy).unwrap_or(Strategy::Joint)
    }

    pub fn model(&self, flag: Option<&str>) -> String {
        flag.or(self.model.as_deref()).unwrap_or(DEFAULT_MODEL).to_string()
    }

    pub fn max_inflight(&self, flag: Option<usize>) -> usize {
        flag.or(self.max_inflight).unwrap_or(DEFAULT_MAX_INFLIGHT)
    }

    pub fn sim_threshold(&self, flag: Option<f64>) -> f64 {
        flag.or(self.sim_threshold).unwrap_or(DEFAULT_SIM_THRESHOLD)
    }

    pub fn nms_iou(&self, flag: Option<f64>) -> f64 {
        flag.or(self.nms_iou).unwrap_or(DEFAULT_NMS_IOU)
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn train(&self, flags: &TrainFile, seed: Option<u64>) -> TrainConfig {
        let file = self.train.clone().unwrap_or_default();
        let d = TrainConfig::default();
        TrainConfig {
            epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
            lr: flags.lr.or(file.lr).unwrap_or(d.lr),
            batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            temperature: flags.temperature.or(file.temperature).unwrap_or(d.temperature),
            alpha: flags.alpha.or(file.alpha).unwrap_or(d.alpha),
            seed: self.seed(seed),
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: impl FnOnce() -> T) -> T {
    flag.or(file).unwrap_or_else(default)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Http,
    Fixtures(PathBuf),
    Heuristic,
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "http" => Ok(Self::Http),
            "heuristic" => Ok(Self::Heuristic),
            other => match other.strip_prefix("fixtures:") {
                Some(dir) if !dir.is_empty() => Ok(Self::Fixtures(PathBuf::from(dir))),
                _ => bail!("unknown backend `{other}` (expected http, fixtures:<dir> or heuristic)"),
            },
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Http => "http",
            Self::Fixtures(_) => "fixtures",
            Self::Heuristic => "heuristic",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let file: PipelineConfig =
            serde_json::from_str(r#"{"train": {"epochs": 80, "lr": 0.01}, "seed": 5, "strategy": "independent"}"#)
                .unwrap();
        let flags = TrainFile {
            epochs: Some(10),
            ..TrainFile::default()
        };
        let t = file.train(&flags, None);
        assert_eq!(t.epochs, 10);
        assert_eq!(t.lr, 0.01);
        assert_eq!(t.batch_size, 1024);
        assert_eq!(t.seed, 5);
        assert_eq!(file.strategy(None), Strategy::Independent);
        assert_eq!(file.strategy(Some(Strategy::Joint)), Strategy::Joint);
        assert_eq!(PipelineConfig::default().sim_threshold(None), DEFAULT_SIM_THRESHOLD);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"epochs": 3}"#).is_err());
    }

    #[test]
    fn backend_specs() {
        assert_eq!(BackendSpec::parse("heuristic").unwrap(), BackendSpec::Heuristic);
        assert_eq!(
            BackendSpec::parse("fixtures:/tmp/x").unwrap(),
            BackendSpec::Fixtures("/tmp/x".into())
        );
        assert!(BackendSpec::parse("fixtures:").is_err());
        assert!(BackendSpec::parse("gpt").is_err());
    }
}
