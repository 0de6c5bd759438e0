//! Clip-level pitch and energy, and quantile categorization.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Category, MixerError, Result};

/// Acceptance threshold on the cumulative-mean-normalized difference.
pub const YIN_THRESHOLD: f64 = 0.15;
pub const MIN_PITCH_HZ: f64 = 50.0;
pub const MAX_PITCH_HZ: f64 = 2000.0;
/// Shortest clip [`estimate_pitch`] accepts.
pub const MIN_PITCH_CLIP_S: f64 = 0.064;
const PITCH_HOP_S: f64 = 0.01;
/// Frames analysed per clip at most (evenly spread), bounding cost on long clips.
const MAX_PITCH_FRAMES: usize = 64;
const SILENT_POWER: f64 = 1e-10;

const ENERGY_FRAME_S: f64 = 0.05;

struct Yin {
    window: usize,
    min_lag: usize,
    max_lag: usize,
    sr: f64,
    size: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Yin {
    fn new(sample_rate: u32) -> Self {
        let sr = f64::from(sample_rate);
        let max_lag = (sr / MIN_PITCH_HZ).ceil() as usize;
        let window = 2 * max_lag;
        let size = (2 * window + max_lag).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            window,
            min_lag: (sr / MAX_PITCH_HZ).floor().max(2.0) as usize,
            max_lag,
            sr,
            size,
            fwd: planner.plan_fft_forward(size),
            inv: planner.plan_fft_inverse(size),
        }
    }

    fn span(&self) -> usize {
        self.window + self.max_lag
    }

    /// Cumulative-mean-normalized difference `d'(τ)` for `τ = 0..=max_lag`.
    fn cmnd(&self, frame: &[f64]) -> Vec<f64> {
        let (w, tmax) = (self.window, self.max_lag);
        let pad = |src: &[f64]| {
            let mut v: Vec<Complex<f64>> = src.iter().map(|&x| Complex::new(x, 0.0)).collect();
            v.resize(self.size, Complex::new(0.0, 0.0));
            v
        };
        let mut a = pad(&frame[..w]);
        let mut b = pad(&frame[..w + tmax]);
        self.fwd.process(&mut a);
        self.fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x = x.conj() * y;
        }
        self.inv.process(&mut a);
        let scale = 1.0 / self.size as f64;

        let mut prefix = vec![0.0; w + tmax + 1];
        for (i, v) in frame[..w + tmax].iter().enumerate() {
            prefix[i + 1] = prefix[i] + v * v;
        }
        let e0 = prefix[w];
        let mut out = vec![1.0; tmax + 1];
        let mut running = 0.0;
        for tau in 1..=tmax {
            let d = (e0 + prefix[tau + w] - prefix[tau] - 2.0 * a[tau].re * scale).max(0.0);
            running += d;
            out[tau] = if running > 0.0 {
                d * tau as f64 / running
            } else {
                1.0
            };
        }
        out
    }

    /// Fundamental of one frame, or `None` when no lag is accepted.
    fn frame_pitch(&self, frame: &[f64]) -> Option<f64> {
        let d = self.cmnd(frame);
        let mut tau = (self.min_lag..=self.max_lag).find(|&t| d[t] < YIN_THRESHOLD)?;
        while tau < self.max_lag && d[tau + 1] < d[tau] {
            tau += 1;
        }
        let refined = if tau > 1 && tau < self.max_lag {
            let (l, c, r) = (d[tau - 1], d[tau], d[tau + 1]);
            let denom = l - 2.0 * c + r;
            if denom.abs() > 1e-12 {
                tau as f64 + 0.5 * (l - r) / denom
            } else {
                tau as f64
            }
        } else {
            tau as f64
        };
        Some(self.sr / refined)
    }
}

/// Mean fundamental over pitched frames, or `None` ("unpitched") unless at
/// least half of the non-silent analysed frames carry a pitch.
pub fn estimate_pitch(samples: &[f64], sample_rate: u32) -> Result<Option<f64>> {
    let yin = Yin::new(sample_rate);
    let min_len = (MIN_PITCH_CLIP_S * f64::from(sample_rate)).round() as usize;
    if samples.len() < min_len.max(yin.span()) {
        return Err(MixerError::TooShort {
            what: "pitch estimation",
            samples: samples.len(),
            required: min_len.max(yin.span()),
        });
    }
    let hop = (PITCH_HOP_S * f64::from(sample_rate)).round() as usize;
    let available = (samples.len() - yin.span()) / hop + 1;
    let used = available.min(MAX_PITCH_FRAMES);
    let (mut voiced, mut sounding, mut sum) = (0usize, 0usize, 0.0);
    for i in 0..used {
        // evenly spread frame starts, always including the first and last
        let f = if used > 1 {
            i * (available - 1) / (used - 1)
        } else {
            0
        };
        let frame = &samples[f * hop..f * hop + yin.span()];
        let power = frame[..yin.window].iter().map(|v| v * v).sum::<f64>() / yin.window as f64;
        if power < SILENT_POWER {
            continue;
        }
        sounding += 1;
        if let Some(p) = yin.frame_pitch(frame) {
            voiced += 1;
            sum += p;
        }
    }
    Ok((voiced > 0 && 2 * voiced >= sounding).then(|| sum / voiced as f64))
}

/// `10·log10` of the mean power over 50 ms frames with 50% overlap (equal to
/// `20·log10` of their RMS). Silence yields `-∞`.
pub fn estimate_energy(samples: &[f64], sample_rate: u32) -> Result<f64> {
    if samples.is_empty() {
        return Err(MixerError::TooShort {
            what: "energy estimation",
            samples: 0,
            required: 1,
        });
    }
    let frame = ((ENERGY_FRAME_S * f64::from(sample_rate)).round() as usize).min(samples.len());
    let hop = (frame / 2).max(1);
    let count = (samples.len() - frame) / hop + 1;
    let total: f64 = (0..count)
        .map(|f| {
            samples[f * hop..f * hop + frame]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                / frame as f64
        })
        .sum();
    let power = total / count as f64;
    Ok(if power > 0.0 {
        10.0 * power.log10()
    } else {
        f64::NEG_INFINITY
    })
}

/// Quartile boundaries of a pool; `q50` is kept for audit only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

impl Thresholds {
    /// Low below `q25`, High above `q75`, Normal otherwise.
    pub fn category(&self, value: f64) -> Category {
        if value < self.q25 {
            Category::Low
        } else if value > self.q75 {
            Category::High
        } else {
            Category::Normal
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

pub fn categorize(values: &[f64]) -> Result<(Thresholds, Vec<Category>)> {
    if values.len() < 4 {
        return Err(MixerError::InvalidParameter(format!(
            "categorization needs at least 4 values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(MixerError::InvalidParameter(format!(
            "cannot categorize non-finite value {v}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = Thresholds {
        q25: quantile(&sorted, 0.25),
        q50: quantile(&sorted, 0.50),
        q75: quantile(&sorted, 0.75),
    };
    Ok((t, values.iter().map(|&v| t.category(v)).collect()))
}
