//! The `mrvg` command line: argument parsing and dispatch to the pipeline
//! stages.

pub mod config;
pub mod pipeline;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::{PipelineConfig, TrainFile};
use mrvg_core::chat::BackendError;
use mrvg_core::evalkit::ThresholdRule;
use mrvg_core::matcher::Strategy;
use mrvg_core::synthgen::{write_dataset, SynthConfig};
use pipeline::{BackendFailure, MissingUpstream};
use std::path::PathBuf;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const ENV_BRIDGE: &str = "MRVG_BRIDGE";

#[derive(Debug, Parser)]
#[command(name = "mrvg", version, about = "Reference-based visual grounding pipeline")]
pub struct Cli {
    /// JSON pipeline config. Flags override it; it overrides built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Dataset root (objects/, queries/, profiles.json) [default: data]
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Directory holding features.json and tensors [default: <dataset>/features]
    #[arg(long, value_name = "DIR")]
    pub tensors: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Run directory for artifacts [default: newest under --runs-root]
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Parent directory of runs [default: runs]
    #[arg(long, value_name = "DIR")]
    pub runs_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Training epochs [default: 640]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 1e-3]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [default: 1024]
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    /// InfoNCE temperature [default: 0.05]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Residual blend weight of the adapter branch [default: 0.6]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// RNG seed for initialization and batch sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn file(&self) -> TrainFile {
        TrainFile {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            temperature: self.temperature,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectArgs {
    /// Minimum cosine similarity to keep a proposal [default: 0.35]
    #[arg(long)]
    pub sim_threshold: Option<f64>,
    /// IoU above which overlapping detections are suppressed [default: 0.5]
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LlmArgs {
    /// http (MRVG_LLM_BASE_URL / MRVG_LLM_API_KEY), fixtures:<dir>, or heuristic [default: http]
    #[arg(long)]
    pub backend: Option<String>,
    /// Model name sent to the backend [default: gpt-4o]
    #[arg(long)]
    pub model: Option<String>,
    /// Maximum concurrent backend requests [default: 4]
    #[arg(long)]
    pub max_inflight: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Check a dataset root (and its feature manifest, if present)
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a seeded synthetic dataset with features and recorded answers
    Synth {
        /// Output dataset root [default: data]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of instances [default: 8]
        #[arg(long)]
        instances: Option<usize>,
        /// Template views per instance [default: 4]
        #[arg(long)]
        views: Option<usize>,
        /// Embedding dimension [default: 32]
        #[arg(long)]
        dim: Option<usize>,
        /// Template noise per coordinate [default: 0.05]
        #[arg(long)]
        cluster_sigma: Option<f64>,
        /// Proposal noise per coordinate [default: 0]
        #[arg(long)]
        proposal_sigma: Option<f64>,
        /// Query scenes [default: 4]
        #[arg(long)]
        scenes: Option<usize>,
        /// Proposals per scene [default: 4]
        #[arg(long)]
        proposals: Option<usize>,
        /// Chance a proposal is clutter [default: 0]
        #[arg(long)]
        distractor_rate: Option<f64>,
        /// Generator seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate an object profile per instance from its detail image
    Describe {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        llm: LlmArgs,
        /// Where to write profiles [default: <dataset>/profiles.json]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run the external feature extractor and verify its manifest
    Extract {
        /// Image directory handed to the extractor
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
        /// Output directory for features.json and tensors
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Extractor config, passed through as its --config
        #[arg(long, value_name = "FILE")]
        bridge_config: Option<PathBuf>,
        /// Extractor command [default: $MRVG_BRIDGE or mrvg-bridge]
        #[arg(long)]
        bridge: Option<String>,
    },
    /// Train the weight adapter on the template bank
    TrainAdapter {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Classify proposals against the bank and suppress duplicates
    Detect {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        detect: DetectArgs,
        /// Use raw embeddings instead of the trained adapter
        #[arg(long)]
        no_adapter: bool,
    },
    /// Match each referring expression to a detected candidate
    Ground {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        llm: LlmArgs,
        /// joint or independent [default: joint]
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Score grounding (Acc, mAcc) and detection (AP)
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Which ground output to score [default: joint]
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Count IoU equal to the threshold as a hit
        #[arg(long)]
        inclusive: bool,
    },
    /// Retrain the adapter for several epoch budgets and compare detection AP
    AblateEpochs {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        detect: DetectArgs,
        /// Epoch budgets to compare
        #[arg(long, value_delimiter = ',', default_value = "80,160,320,640")]
        epochs_list: Vec<usize>,
    },
}

/// 2 when a language-model backend failed, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let backend = err
        .chain()
        .any(|c| c.downcast_ref::<BackendError>().is_some() || c.downcast_ref::<BackendFailure>().is_some());
    if backend {
        EXIT_BACKEND
    } else {
        EXIT_FAILURE
    }
}

pub fn is_missing_upstream(err: &anyhow::Error) -> bool {
    err.chain().any(|c| c.downcast_ref::<MissingUpstream>().is_some())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    let paths = |d: &DataArgs| {
        let dataset = cfg.dataset_root(d.dataset.as_ref());
        let tensors = cfg.tensor_root(d.tensors.as_ref(), &dataset);
        (dataset, tensors)
    };
    let existing_run = |r: &RunArgs| pipeline::existing_run_dir(cfg.run_dir(r.run_dir.as_ref()), &cfg.runs_root(r.runs_root.as_ref()));

    match cli.command {
        Cmd::Validate { data } => {
            let (dataset, tensors) = paths(&data);
            print_json(&pipeline::validate(&dataset, &tensors)?)
        }
        Cmd::Synth {
            out,
            instances,
            views,
            dim,
            cluster_sigma,
            proposal_sigma,
            scenes,
            proposals,
            distractor_rate,
            seed,
        } => {
            let base = cfg.synth.clone().unwrap_or_default();
            let synth = SynthConfig {
                n_instances: instances.unwrap_or(base.n_instances),
                k_views: views.unwrap_or(base.k_views),
                dim: dim.unwrap_or(base.dim),
                cluster_sigma: cluster_sigma.unwrap_or(base.cluster_sigma),
                proposal_sigma: proposal_sigma.unwrap_or(base.proposal_sigma),
                scene_count: scenes.unwrap_or(base.scene_count),
                proposals_per_scene: proposals.unwrap_or(base.proposals_per_scene),
                distractor_rate: distractor_rate.unwrap_or(base.distractor_rate),
                seed: seed.or(cfg.seed).unwrap_or(base.seed),
            };
            let out = cfg.dataset_root(out.as_ref());
            print_json(&write_dataset(&synth, &out)?)
        }
        Cmd::Describe { data, llm, out } => {
            let (dataset, _) = paths(&data);
            let path = pipeline::describe(
                &dataset,
                &cfg.backend(llm.backend.as_deref())?,
                &cfg.model(llm.model.as_deref()),
                cfg.max_inflight(llm.max_inflight),
                out.as_deref(),
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Cmd::Extract {
            images,
            out,
            bridge_config,
            bridge,
        } => {
            let bridge = bridge
                .or_else(|| std::env::var(ENV_BRIDGE).ok())
                .unwrap_or_else(|| "mrvg-bridge".to_string());
            print_json(&pipeline::extract(&bridge, &images, &out, bridge_config.as_deref())?)
        }
        Cmd::TrainAdapter { data, run, train } => {
            let (dataset, tensors) = paths(&data);
            let tcfg = cfg.train(&train.file(), train.seed);
            let run_dir = match cfg.run_dir(run.run_dir.as_ref()) {
                Some(d) => d,
                None => pipeline::new_run_dir(&cfg.runs_root(run.runs_root.as_ref()), tcfg.seed)?,
            };
            let header = pipeline::train(&dataset, &tensors, &run_dir, &tcfg)?;
            println!(
                "trained {} epochs (loss {:.4} -> {:.4}); checkpoint in {}",
                header.train.epochs,
                header.loss_history.first().copied().unwrap_or(f64::NAN),
                header.loss_history.last().copied().unwrap_or(f64::NAN),
                run_dir.join(pipeline::ADAPTER_DIR).display()
            );
            Ok(())
        }
        Cmd::Detect {
            data,
            run,
            detect,
            no_adapter,
        } => {
            let (dataset, tensors) = paths(&data);
            let run_dir = match (no_adapter, cfg.run_dir(run.run_dir.as_ref())) {
                (true, None) => pipeline::latest_run_dir(&cfg.runs_root(run.runs_root.as_ref()))
                    .map_or_else(|| pipeline::new_run_dir(&cfg.runs_root(run.runs_root.as_ref()), cfg.seed(None)), Ok)?,
                _ => existing_run(&run)?,
            };
            let params = if no_adapter {
                None
            } else {
                Some(pipeline::load_adapter(&run_dir)?.1)
            };
            let art = pipeline::detect(
                &dataset,
                &tensors,
                &run_dir,
                params.as_ref(),
                cfg.sim_threshold(detect.sim_threshold),
                cfg.nms_iou(detect.nms_iou),
            )?;
            let n: usize = art.images.iter().map(|i| i.detections.len()).sum();
            println!("{n} detections over {} images in {}", art.images.len(), run_dir.display());
            Ok(())
        }
        Cmd::Ground {
            data,
            run,
            llm,
            strategy,
        } => {
            let (dataset, _) = paths(&data);
            let run_dir = existing_run(&run)?;
            let strategy = cfg.strategy(strategy);
            let art = pipeline::ground(
                &dataset,
                &run_dir,
                &cfg.backend(llm.backend.as_deref())?,
                strategy,
                &cfg.model(llm.model.as_deref()),
                cfg.max_inflight(llm.max_inflight),
            )?;
            let n: usize = art.images.iter().map(|i| i.matches.len()).sum();
            println!("{n} expressions matched; wrote {}", run_dir.join(pipeline::matches_file(strategy)).display());
            Ok(())
        }
        Cmd::Eval {
            data,
            run,
            strategy,
            inclusive,
        } => {
            let (dataset, _) = paths(&data);
            let run_dir = existing_run(&run)?;
            let rule = if inclusive {
                ThresholdRule::Inclusive
            } else {
                ThresholdRule::Strict
            };
            let report = pipeline::evaluate(&dataset, &run_dir, cfg.strategy(strategy), rule)?;
            print!("{}", report.grounding.table());
            println!(
                "detection AP {:.2}  AP50 {:.2}  AP75 {:.2}",
                100.0 * report.detection.ap,
                100.0 * report.detection.ap50,
                100.0 * report.detection.ap75
            );
            Ok(())
        }
        Cmd::AblateEpochs {
            data,
            run,
            train,
            detect,
            epochs_list,
        } => {
            let (dataset, tensors) = paths(&data);
            let base = cfg.train(&train.file(), train.seed);
            let run_dir = match cfg.run_dir(run.run_dir.as_ref()) {
                Some(d) => d,
                None => pipeline::new_run_dir(&cfg.runs_root(run.runs_root.as_ref()), base.seed)?,
            };
            let art = pipeline::ablate_epochs(
                &dataset,
                &tensors,
                &run_dir,
                &base,
                &epochs_list,
                cfg.sim_threshold(detect.sim_threshold),
                cfg.nms_iou(detect.nms_iou),
            )?;
            println!("{:>8} {:>10} {:>8} {:>8} {:>8}", "epochs", "loss", "AP", "AP50", "AP75");
            for r in &art.rows {
                println!(
                    "{:>8} {:>10.4} {:>8.2} {:>8.2} {:>8.2}",
                    r.epochs,
                    r.final_loss,
                    100.0 * r.detection.ap,
                    100.0 * r.detection.ap50,
                    100.0 * r.detection.ap75
                );
            }
            Ok(())
        }
    }
}
