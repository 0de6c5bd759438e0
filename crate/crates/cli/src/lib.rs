//! Command-line pipeline: `mix` builds a dataset, `train` fits the flow model,
//! `sample` generates from captions, `eval` scores a generated run against its
//! reference, and `gradcheck` verifies every backward rule.
//!
//! Logs go to stderr, summaries to stdout, machine-readable results to files.
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod resynth;

pub use config::{ConfigError, RunConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mixer(#[from] audiocomposer::mixer::MixerError),
    #[error(transparent)]
    Model(#[from] audiocomposer::model::ModelError),
    #[error(transparent)]
    Flow(#[from] audiocomposer::flow::FlowError),
    #[error(transparent)]
    Metrics(#[from] audiocomposer::metrics::MetricsError),
    #[error(transparent)]
    Tensor(#[from] audiocomposer::tensor::TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "audiocomposer",
    version,
    about = "Text-controlled sound-event generation at desk scale"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an annotated mixture dataset.
    Mix {
        /// Number of mixtures.
        #[arg(long)]
        n: usize,
    },
    /// Train the flow model on a dataset directory.
    Train {
        /// Dataset directory written by `mix`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate feature sequences (and resynthesized audio) from captions.
    Sample {
        /// `model.acmp` written by `train`; its directory must hold `dataset.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// One caption per line, optionally prefixed by `id<TAB>`.
        #[arg(long)]
        captions: PathBuf,
        /// Euler steps (default: `sampler.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Items integrated together.
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Score a generated manifest against its reference.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        /// Reference dataset directory or manifest file.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Finite-difference check of every backward rule and the full objective.
    Gradcheck {
        /// Seeded instances per check.
        #[arg(long, default_value_t = 100)]
        instances: u64,
        /// Corrupts one backward rule (exercises the failure path).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

impl Common {
    /// Defaults, then the config file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    match &cli.command {
        Command::Mix { n } => commands::mix(&cfg, *n).map(drop),
        Command::Train { data, resume } => commands::train(&cfg, data, *resume).map(drop),
        Command::Sample {
            checkpoint,
            captions,
            steps,
            batch,
        } => commands::sample(&cfg, checkpoint, captions, *steps, *batch).map(drop),
        Command::Eval {
            generated,
            reference,
        } => commands::eval(&cfg, generated, reference).map(drop),
        Command::Gradcheck { instances, fault } => {
            commands::gradcheck(&cfg, *instances, fault.as_deref()).map(drop)
        }
    }
}
