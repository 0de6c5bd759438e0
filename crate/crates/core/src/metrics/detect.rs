//! Rule-based detector for the synthetic event classes.
//!
//! Each class owns a disjoint set of mel bands. Its envelope is the summed band
//! power per frame; hysteresis relative to the loudest class envelope in the
//! clip opens and closes events. Pitch comes from the power-weighted band
//! centroid (linear triangles make the centroid of a pure tone equal its
//! frequency), energy from the in-window mean power.

use serde::{Deserialize, Serialize};

use super::{Contour, Event, EventList, MetricsError, Result};
use crate::mixer::{Category, MelFrontend, SynthClass, Thresholds, HOP, N_MELS};
use crate::tensor::Tensor;

pub const ON_DB: f64 = 30.0;
pub const OFF_DB: f64 = 36.0;
/// Envelopes below this level never open an event, whatever the clip peak.
pub const FLOOR_DB: f64 = -70.0;
pub const MIN_EVENT_S: f64 = 0.2;
pub const MERGE_GAP_S: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBand {
    pub label: String,
    pub bands: Vec<usize>,
    /// Centre frequency of each band in `bands`, Hz.
    pub centres: Vec<f64>,
    pub tonal: bool,
    pub centroid_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub classes: Vec<ClassBand>,
    pub frame_rate: f64,
}

impl Registry {
    /// Bands for synthetic class names; any other label is rejected.
    pub fn synthetic(labels: &[String], sample_rate: u32) -> Result<Self> {
        let fe = MelFrontend::new(sample_rate);
        let classes = labels
            .iter()
            .map(|l| {
                let class: SynthClass = l
                    .parse()
                    .map_err(|_| MetricsError::UnknownClass(l.clone()))?;
                let (lo, hi) = class.footprint();
                let bands = fe.bands_overlapping(lo, hi);
                Ok(ClassBand {
                    label: l.clone(),
                    centres: bands.iter().map(|&b| fe.band_hz(b).1).collect(),
                    bands,
                    tonal: class.is_tonal(),
                    centroid_ratio: class.centroid_ratio(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            frame_rate: f64::from(sample_rate) / HOP as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    /// On the 0.1 s grid.
    pub start_s: f64,
    pub end_s: f64,
    pub pitch_hz: Option<f64>,
    pub energy_db: f64,
    pub pitch_category: Category,
    pub energy_category: Category,
}

impl Detection {
    pub fn event(&self) -> Event {
        Event::new(self.label.clone(), self.start_s, self.end_s)
    }

    pub fn annotation(&self) -> crate::mixer::EventAnnotation {
        crate::mixer::EventAnnotation {
            label: self.label.clone(),
            start_s: self.start_s,
            end_s: self.end_s,
            pitch_category: self.pitch_category,
            energy_category: self.energy_category,
        }
    }
}

/// A registry together with the pool thresholds used to categorize detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub registry: Registry,
    pub pitch: Option<Thresholds>,
    pub energy: Thresholds,
}

/// Linear band powers from dB features.
fn powers(features: &Tensor) -> Result<(usize, Vec<f64>)> {
    match features.shape() {
        &[frames, N_MELS] => Ok((
            frames,
            features
                .data()
                .iter()
                .map(|v| 10f64.powf(v / 10.0))
                .collect(),
        )),
        s => Err(MetricsError::InvalidParameter(format!(
            "features must be [frames, {N_MELS}], got {s:?}"
        ))),
    }
}

fn db(p: f64) -> f64 {
    10.0 * p.max(1e-30).log10()
}

impl Detector {
    fn envelopes(&self, frames: usize, p: &[f64]) -> Vec<Vec<f64>> {
        self.registry
            .classes
            .iter()
            .map(|c| {
                (0..frames)
                    .map(|f| c.bands.iter().map(|&b| p[f * N_MELS + b]).sum())
                    .collect()
            })
            .collect()
    }

    fn centroid(class: &ClassBand, p: &[f64], frames: std::ops::Range<usize>) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for f in frames {
            for (&b, &c) in class.bands.iter().zip(&class.centres) {
                num += p[f * N_MELS + b] * c;
                den += p[f * N_MELS + b];
            }
        }
        (den > 0.0).then(|| num / den / class.centroid_ratio)
    }

    /// Events in `features` (`[frames, N_MELS]`, dB) of a clip lasting `duration_s`.
    pub fn detect(&self, features: &Tensor, duration_s: f64) -> Result<Vec<Detection>> {
        let (frames, p) = powers(features)?;
        let env = self.envelopes(frames, &p);
        let peak = env
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(db(v)));
        let on = (peak - ON_DB).max(FLOOR_DB);
        let off = (peak - OFF_DB).max(FLOOR_DB - (OFF_DB - ON_DB));
        let fps = self.registry.frame_rate;
        let max_gap = (MERGE_GAP_S * fps + 1e-9).floor() as usize;
        let min_frames = (MIN_EVENT_S * fps - 1e-9).ceil() as usize;
        let mut out = Vec::new();
        for (class, e) in self.registry.classes.iter().zip(&env) {
            // inclusive frame runs
            let mut runs: Vec<(usize, usize)> = Vec::new();
            let mut open: Option<usize> = None;
            for (f, &v) in e.iter().enumerate() {
                let level = db(v);
                match open {
                    None if level >= on => open = Some(f),
                    Some(s) if level < off => {
                        runs.push((s, f - 1));
                        open = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = open {
                runs.push((s, frames - 1));
            }
            let mut merged: Vec<(usize, usize)> = Vec::new();
            for r in runs {
                match merged.last_mut() {
                    Some(last) if r.0 - last.1 - 1 <= max_gap => last.1 = r.1,
                    _ => merged.push(r),
                }
            }
            for (a, b) in merged.into_iter().filter(|(a, b)| b - a + 1 >= min_frames) {
                let limit = (duration_s * 10.0 + 1e-9).floor() as u32;
                let start = ((a as f64 / fps * 10.0).round() as u32).min(limit.saturating_sub(1));
                let end = ((b as f64 / fps * 10.0).round() as u32).clamp(start + 1, limit);
                let energy_db = db((a..=b).map(|f| e[f]).sum::<f64>() / (b - a + 1) as f64);
                let pitch_hz = if class.tonal {
                    Self::centroid(class, &p, a..b + 1)
                } else {
                    None
                };
                out.push(Detection {
                    label: class.label.clone(),
                    start_s: f64::from(start) / 10.0,
                    end_s: f64::from(end) / 10.0,
                    pitch_category: match (self.pitch, pitch_hz) {
                        (Some(t), Some(h)) => t.category(h),
                        _ => Category::Normal,
                    },
                    energy_category: self.energy.category(energy_db),
                    pitch_hz,
                    energy_db,
                });
            }
        }
        out.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then_with(|| a.label.cmp(&b.label))
        });
        Ok(out)
    }

    /// Per-frame pitch (loudest sounding tonal class, `None` when no tonal
    /// class is above the detection threshold) and total energy in dB.
    pub fn contours(&self, features: &Tensor) -> Result<(Contour, Contour)> {
        let (frames, p) = powers(features)?;
        let env = self.envelopes(frames, &p);
        let peak = env
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(db(v)));
        let on = (peak - ON_DB).max(FLOOR_DB);
        let pitch = (0..frames)
            .map(|f| {
                self.registry
                    .classes
                    .iter()
                    .zip(&env)
                    .filter(|(c, e)| c.tonal && db(e[f]) >= on)
                    .max_by(|a, b| a.1[f].total_cmp(&b.1[f]))
                    .and_then(|(c, _)| Self::centroid(c, &p, f..f + 1))
            })
            .collect();
        let energy = (0..frames)
            .map(|f| Some(db(p[f * N_MELS..(f + 1) * N_MELS].iter().sum())))
            .collect();
        let rate = self.registry.frame_rate;
        Ok((
            Contour {
                values: pitch,
                frame_rate: rate,
            },
            Contour {
                values: energy,
                frame_rate: rate,
            },
        ))
    }
}

pub fn detect_events(
    features: &Tensor,
    duration_s: f64,
    detector: &Detector,
) -> Result<(EventList, Vec<Detection>)> {
    let d = detector.detect(features, duration_s)?;
    Ok((
        EventList::new(d.iter().map(Detection::event).collect(), duration_s)?,
        d,
    ))
}

pub fn contours(features: &Tensor, detector: &Detector) -> Result<(Contour, Contour)> {
    detector.contours(features)
}
