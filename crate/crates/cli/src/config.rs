//! Run configuration: a flat `key = value` file with `model.`, `mixer.`,
//! `sampler.` and `train.` prefixes. Every key has a default, so an empty file
//! runs the toy pipeline.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! mixer.classes = Hum, Beep
//! mixer.allow_overlap = false
//! train.steps = 2000
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use audiocomposer::flow::Schedule;
use audiocomposer::mixer::{MixConfig, PoolConfig, PoolSource, SynthClass};
use audiocomposer::model::ModelConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: {message}")]
    Syntax {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("config key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 1000,
            lr: 1e-4,
            weight_decay: 0.01,
            log_every: 50,
            checkpoint_every: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: Schedule,
    pub sampler_steps: usize,
    /// `vocab_size` and `feature_channels` are filled in from the dataset.
    pub model: ModelConfig,
    pub pool: PoolConfig,
    pub mix: MixConfig,
    /// Trailing records of a `mix` run kept out of the training manifest.
    pub holdout: usize,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: Schedule::Linear,
            sampler_steps: audiocomposer::flow::DEFAULT_SAMPLER_STEPS,
            model: ModelConfig::toy(0),
            pool: PoolConfig::default(),
            mix: MixConfig::default(),
            holdout: 0,
            train: TrainConfig::default(),
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        message: format!("`{value}`: {e}"),
    })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` in order.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    /// Sets one key; unknown keys are errors so typos never pass silently.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let train = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "schedule" => self.schedule = parse(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "sampler.steps" => self.sampler_steps = parse(key, value)?,
            "model.vocab_size" | "model.feature_channels" => {
                return Err(ConfigError::Value {
                    key: key.into(),
                    message: "derived from the dataset and cannot be set".into(),
                })
            }
            k if k.starts_with("model.") => {
                let v: usize = parse(key, value)?;
                if !self.model.set(&k["model.".len()..], v) {
                    return Err(unknown(key));
                }
            }
            "mixer.pool" => {
                self.pool.source = if value == "synthetic" {
                    PoolSource::Synthetic
                } else {
                    PoolSource::WavDir(PathBuf::from(value))
                }
            }
            "mixer.classes" => {
                self.pool.classes = value
                    .split(',')
                    .map(|c| c.trim())
                    .filter(|c| !c.is_empty())
                    .map(|c| c.parse::<SynthClass>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| ConfigError::Value {
                        key: key.into(),
                        message: e.to_string(),
                    })?
            }
            "mixer.clips_per_class" => self.pool.clips_per_class = parse(key, value)?,
            "mixer.min_event_s" => self.pool.min_event_s = parse(key, value)?,
            "mixer.max_event_s" => self.pool.max_event_s = parse(key, value)?,
            "mixer.min_gain_db" => self.pool.min_gain_db = parse(key, value)?,
            "mixer.max_gain_db" => self.pool.max_gain_db = parse(key, value)?,
            "mixer.min_events" => self.mix.min_events = parse(key, value)?,
            "mixer.max_events" => self.mix.max_events = parse(key, value)?,
            "mixer.duration_s" => self.mix.duration_s = parse(key, value)?,
            "mixer.allow_overlap" => self.mix.allow_overlap = parse(key, value)?,
            "mixer.min_gap_s" => self.mix.min_gap_s = parse(key, value)?,
            "mixer.holdout" => self.holdout = parse(key, value)?,
            "train.batch_size" => train.batch_size = parse(key, value)?,
            "train.steps" => train.steps = parse(key, value)?,
            "train.lr" => train.lr = parse(key, value)?,
            "train.weight_decay" => train.weight_decay = parse(key, value)?,
            "train.log_every" => train.log_every = parse(key, value)?,
            "train.checkpoint_every" => train.checkpoint_every = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Checks every setting without touching the filesystem beyond
    /// confirming that a WAV pool directory exists.
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(1);
        model.feature_channels = model.feature_channels.max(1);
        model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pool
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("mixer: {e}")))?;
        self.mix
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("mixer: {e}")))?;
        if let PoolSource::WavDir(dir) = &self.pool.source {
            if !dir.is_dir() {
                return invalid(format!("mixer.pool: {} is not a directory", dir.display()));
            }
        }
        if self.sampler_steps == 0 {
            return invalid("sampler.steps must be at least 1".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.log_every == 0 || t.checkpoint_every == 0 {
            return invalid(
                "train.batch_size, train.log_every and train.checkpoint_every must be positive"
                    .into(),
            );
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return invalid(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return invalid(format!(
                "train.weight_decay must be non-negative, got {}",
                t.weight_decay
            ));
        }
        Ok(())
    }
}

fn unknown(key: &str) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: "unknown key".into(),
    }
}
