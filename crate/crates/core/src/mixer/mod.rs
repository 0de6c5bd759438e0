//! Annotated mixture simulation.
//!
//! Single-event clips (synthesized or read from labelled WAV directories) are
//! measured for pitch and energy, bucketed into Low/Normal/High by pool
//! quartiles, placed into fixed-length mixtures, and described by a templated
//! caption that parses back to the exact annotations.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod analysis;
pub mod dataset;
pub mod features;
pub mod nld;
pub mod simulate;
pub mod synth;

pub use analysis::{categorize, estimate_energy, estimate_pitch, Thresholds};
pub use dataset::{
    build_dataset, build_pool, read_features, read_wav, write_features, write_wav, DatasetInfo,
    Manifest, ManifestRecord, PoolConfig, PoolSource,
};
pub use features::{FeatureStats, MelFrontend, HOP, N_MELS, SAMPLE_RATE};
pub use nld::{parse_nld, render_nld};
pub use simulate::{simulate_mixture, MixConfig, Pool};
pub use synth::{synth_event, SynthClass};

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("{what} has {samples} samples, needs at least {required}")]
    TooShort {
        what: &'static str,
        samples: usize,
        required: usize,
    },
    #[error("{0}")]
    InvalidParameter(String),
    #[error("unknown event class `{0}`")]
    UnknownClass(String),
    #[error("caption offset {offset}: {message}")]
    Caption { offset: usize, message: String },
    #[error("invalid annotation: {0}")]
    Annotation(String),
    #[error("could not place an event after {attempts} attempts: {reason}")]
    Placement { attempts: usize, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<MixerError>,
    },
}

pub type Result<T> = std::result::Result<T, MixerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Low,
    Normal,
    High,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Low, Category::Normal, Category::High];

    pub fn name(self) -> &'static str {
        match self {
            Category::Low => "Low",
            Category::Normal => "Normal",
            Category::High => "High",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = MixerError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| MixerError::InvalidParameter(format!("unknown category `{s}`")))
    }
}

/// A single labelled event recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: String,
    /// `None` when the clip is unpitched.
    pub mean_pitch: Option<f64>,
    /// dB; `-inf` for a silent clip.
    pub mean_energy: f64,
    pub pitch_category: Category,
    pub energy_category: Category,
}

impl SourceClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Times live on a 0.1 s grid: every value is `k as f64 / 10.0` for an integer `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(rename = "pitch")]
    pub pitch_category: Category,
    #[serde(rename = "energy")]
    pub energy_category: Category,
}

/// Converts seconds to tenths, rejecting values off the 0.1 s grid.
pub fn tenths(seconds: f64) -> Option<u32> {
    let k = (seconds * 10.0).round();
    (k >= 0.0 && k <= f64::from(u32::MAX) && k / 10.0 == seconds).then_some(k as u32)
}

impl EventAnnotation {
    pub fn new(
        label: impl Into<String>,
        start_tenths: u32,
        end_tenths: u32,
        pitch_category: Category,
        energy_category: Category,
    ) -> Self {
        Self {
            label: label.into(),
            start_s: f64::from(start_tenths) / 10.0,
            end_s: f64::from(end_tenths) / 10.0,
            pitch_category,
            energy_category,
        }
    }

    /// Checks the label grammar, the 0.1 s grid and `start < end`.
    pub fn validate(&self) -> Result<()> {
        nld::check_label(&self.label).map_err(MixerError::Annotation)?;
        let (Some(s), Some(e)) = (tenths(self.start_s), tenths(self.end_s)) else {
            return Err(MixerError::Annotation(format!(
                "{}: times {} and {} must be non-negative multiples of 0.1 s",
                self.label, self.start_s, self.end_s
            )));
        };
        if s >= e {
            return Err(MixerError::Annotation(format!(
                "{}: start {:.1} s is not before end {:.1} s",
                self.label, self.start_s, self.end_s
            )));
        }
        Ok(())
    }
}

/// A simulated scene with its annotations, caption and raw (unnormalized) features.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub annotations: Vec<EventAnnotation>,
    pub caption: String,
    /// `[frames, N_MELS]` log band powers in dB.
    pub features: crate::tensor::Tensor,
}
