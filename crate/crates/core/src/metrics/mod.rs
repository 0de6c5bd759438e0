//! Controllability scoring.
//!
//! Segment- and event-based F1, category accuracy over aligned events,
//! frame-wise contour MAE, and a rule-based detector for the synthetic event
//! classes that turns feature sequences back into annotated events.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixer::{Category, MixerError};

pub mod detect;
pub mod f1;
pub mod report;

pub use detect::{contours, detect_events, ClassBand, Detection, Detector, Registry};
pub use f1::{event_f1, event_matches, matched_pairs, segment_f1};
pub use report::{evaluate_run, EvalContext, Report};

pub const DEFAULT_SEGMENT_S: f64 = 1.0;
pub const DEFAULT_COLLAR_S: f64 = 0.2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("clip durations differ: reference {reference} s, hypothesis {hypothesis} s")]
    DurationMismatch { reference: f64, hypothesis: f64 },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("{0}")]
    InvalidParameter(String),
    #[error("contours share no defined frames")]
    NoCommonFrames,
    #[error("frame rates differ: {0} vs {1}")]
    FrameRate(f64, f64),
    #[error("class `{0}` has no detector band")]
    UnknownClass(String),
    #[error("item ids do not line up; missing from generated: {missing_generated:?}; missing from reference: {missing_reference:?}")]
    MissingIds {
        missing_generated: Vec<String>,
        missing_reference: Vec<String>,
    },
    #[error(transparent)]
    Mixer(#[from] MixerError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl Event {
    pub fn new(label: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            label: label.into(),
            start_s,
            end_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    pub events: Vec<Event>,
    pub duration_s: f64,
}

impl EventList {
    pub fn new(events: Vec<Event>, duration_s: f64) -> Result<Self> {
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(MetricsError::InvalidParameter(format!(
                "clip duration {duration_s} s"
            )));
        }
        for e in &events {
            if !(0.0 <= e.start_s && e.start_s < e.end_s && e.end_s <= duration_s) {
                return Err(MetricsError::InvalidEvent(format!(
                    "{} [{}, {}) outside [0, {duration_s}]",
                    e.label, e.start_s, e.end_s
                )));
            }
        }
        Ok(Self { events, duration_s })
    }

    pub fn from_annotations(
        annotations: &[crate::mixer::EventAnnotation],
        duration_s: f64,
    ) -> Result<Self> {
        Self::new(
            annotations
                .iter()
                .map(|a| Event::new(a.label.clone(), a.start_s, a.end_s))
                .collect(),
            duration_s,
        )
    }
}

/// True positives, false positives and false negatives of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> Option<f64> {
        (self.tp + self.fp > 0).then(|| self.tp as f64 / (self.tp + self.fp) as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    /// `2TP / (2TP + FP + FN)`; `None` when the class never occurs.
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-class counts; scores are derived so per-item results can be pooled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub classes: BTreeMap<String, Counts>,
}

impl F1Score {
    pub fn class_f1(&self, label: &str) -> Option<f64> {
        self.classes.get(label).and_then(Counts::f1)
    }

    /// Unweighted mean over classes present in the reference or hypothesis.
    /// With no classes at all the two lists agree trivially and the score is 1.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = self.classes.values().filter_map(Counts::f1).collect();
        if scores.is_empty() {
            1.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }

    pub fn merge(&mut self, other: &F1Score) {
        for (label, c) in &other.classes {
            self.classes.entry(label.clone()).or_default().add(*c);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: Accuracy) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

/// Aligned category lists; `None` marks a reference event with no counterpart
/// and always counts as wrong.
pub fn category_accuracy(
    reference: &[Category],
    hypothesis: &[Option<Category>],
) -> Result<Accuracy> {
    if reference.len() != hypothesis.len() {
        return Err(MetricsError::InvalidParameter(format!(
            "{} reference categories against {} hypotheses",
            reference.len(),
            hypothesis.len()
        )));
    }
    Ok(Accuracy {
        correct: reference
            .iter()
            .zip(hypothesis)
            .filter(|(r, h)| Some(**r) == **h)
            .count(),
        total: reference.len(),
    })
}

/// Frame values at a fixed rate; `None` marks an undefined (e.g. unpitched) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub values: Vec<Option<f64>>,
    pub frame_rate: f64,
}

/// Sum of absolute differences and number of frames, over the common length
/// where both contours are defined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AbsError {
    pub sum: f64,
    pub frames: usize,
}

impl AbsError {
    pub fn mean(&self) -> Option<f64> {
        (self.frames > 0).then(|| self.sum / self.frames as f64)
    }

    pub fn merge(&mut self, other: AbsError) {
        self.sum += other.sum;
        self.frames += other.frames;
    }
}

pub fn contour_error(reference: &Contour, hypothesis: &Contour) -> Result<AbsError> {
    if reference.frame_rate != hypothesis.frame_rate {
        return Err(MetricsError::FrameRate(
            reference.frame_rate,
            hypothesis.frame_rate,
        ));
    }
    let mut e = AbsError::default();
    for (r, h) in reference.values.iter().zip(&hypothesis.values) {
        if let (Some(r), Some(h)) = (r, h) {
            e.sum += (r - h).abs();
            e.frames += 1;
        }
    }
    Ok(e)
}

/// Mean absolute difference over commonly defined frames of the truncated contours.
pub fn framewise_mae(reference: &Contour, hypothesis: &Contour) -> Result<f64> {
    contour_error(reference, hypothesis)?
        .mean()
        .ok_or(MetricsError::NoCommonFrames)
}
