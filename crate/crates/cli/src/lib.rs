//! Command-line pipeline over `gpla-core`: dataset generation, grounding and
//! supervised training, GPLA alignment, rollout, scoring and evaluation.

pub mod artifact;
pub mod config;
pub mod stages;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use crate::artifact::{Manifest, RunLock};
use crate::config::RunConfig;
use crate::stages::{Ctx, PolicyKind};

/// Environment variable overriding the worker-thread count.
pub const THREADS_ENV: &str = "GPLA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "gpla",
    version,
    about = "Grounded preference alignment pipeline on a synthetic block-pushing world"
)]
pub struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the `seed` key of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding one artifact directory per stage.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Worker threads for candidate generation (defaults to the core count).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate episodes and the train/val/test split.
    Gen,
    /// Train the grounding model on the training split.
    TrainGrounding,
    /// Train the high-level LM and the low-level decoder.
    TrainSup,
    /// Align the LM with grounding-ranked preference pairs.
    GplaTrain,
    /// Run a policy open-loop over the held-out split.
    Rollout {
        #[arg(long, value_enum, default_value = "sup")]
        policy: PolicyKind,
    },
    /// Grounding scores of held-out ground-truth triples.
    Score {
        /// Grounding checkpoint (defaults to the run's `train-grounding` output).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory (defaults to the run's `gen` output).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Joint-space embeddings of held-out samples, both modalities.
    Embed {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Aggregate every rollout into the report CSV.
    Eval,
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let (mut cfg, defaults) = RunConfig::from_toml(&text).with_context(|| {
        format!(
            "loading configuration {}",
            path.map(|p| p.display().to_string())
                .unwrap_or_else(|| "(none)".into())
        )
    })?;
    for key in &defaults {
        info!("config default: {key}");
    }
    if let Some(s) = seed {
        info!("seed {s} from the command line");
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<Manifest> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let threads = cli
        .threads
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1);
    let _lock = RunLock::acquire(&cli.out)?;
    let ctx = Ctx {
        run_dir: cli.out.clone(),
        cfg,
        threads,
    };
    let manifest = match &cli.command {
        Command::Gen => stages::gen(&ctx),
        Command::TrainGrounding => stages::train_grounding_stage(&ctx),
        Command::TrainSup => stages::train_sup_stage(&ctx),
        Command::GplaTrain => stages::gpla_stage(&ctx),
        Command::Rollout { policy } => stages::rollout_stage(&ctx, *policy),
        Command::Score { model, dataset } => {
            stages::score_stage(&ctx, model.as_deref(), dataset.as_deref())
        }
        Command::Embed { model, dataset } => {
            stages::embed_stage(&ctx, model.as_deref(), dataset.as_deref())
        }
        Command::Eval => stages::eval_stage(&ctx),
    }?;
    info!(
        "{} finished in {:.1}s",
        manifest.stage, manifest.wall_clock_secs
    );
    Ok(manifest)
}
