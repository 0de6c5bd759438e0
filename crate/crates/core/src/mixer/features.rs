//! Log-mel-like feature frontend.
//!
//! Hann-windowed 1024-point frames, centred on multiples of the hop (zero
//! padding at the edges), power spectrum scaled so that its sum equals the
//! window-weighted mean square of the frame, then 64 triangular mel bands whose
//! weights sum to one across the covered range. Features are
//! `10·log10(band power + 1e-10)`, so the total over bands of a frame is close
//! to its mean-square power.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{MixerError, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
/// 40 ms at 16 kHz: 25 frames per second.
pub const HOP: usize = 640;
pub const N_MELS: usize = 64;
pub const FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub struct MelFrontend {
    sample_rate: u32,
    window: Vec<f64>,
    /// Per band: first FFT bin and weights for consecutive bins.
    bands: Vec<(usize, Vec<f64>)>,
    /// Band edges in Hz: band `b` spans `edges[b]..edges[b + 2]`, peaking at `edges[b + 1]`.
    edges: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl MelFrontend {
    pub fn new(sample_rate: u32) -> Self {
        let sr = f64::from(sample_rate);
        let window: Vec<f64> = (0..N_FFT)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / N_FFT as f64).cos())
            .collect();
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = sr / N_FFT as f64;
        let bands = (0..N_MELS)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let first = (lo / bin_hz).ceil() as usize;
                let last = ((hi / bin_hz).floor() as usize).min(N_FFT / 2);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                        .max(0.0)
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self {
            sample_rate,
            window,
            bands,
            edges,
            fft,
        }
    }

    /// Shared instance for the default sample rate.
    pub fn standard() -> &'static MelFrontend {
        static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
        FRONTEND.get_or_init(|| MelFrontend::new(SAMPLE_RATE))
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Lower edge, centre and upper edge of band `b`, in Hz.
    pub fn band_hz(&self, b: usize) -> (f64, f64, f64) {
        (self.edges[b], self.edges[b + 1], self.edges[b + 2])
    }

    /// Bands whose support overlaps `[lo, hi]` Hz.
    pub fn bands_overlapping(&self, lo: f64, hi: f64) -> Vec<usize> {
        (0..N_MELS)
            .filter(|&b| self.edges[b] < hi && self.edges[b + 2] > lo)
            .collect()
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples / HOP + 1
    }

    /// Band powers, `[frames, N_MELS]` in linear units.
    pub fn band_power(&self, samples: &[f64]) -> Vec<f64> {
        let frames = self.frames_for(samples.len());
        let half = N_FFT / 2;
        let wsum: f64 = self.window.iter().map(|w| w * w).sum();
        let norm = 1.0 / (N_FFT as f64 * wsum);
        let mut out = vec![0.0; frames * N_MELS];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; half + 1];
        for f in 0..frames {
            let centre = (f * HOP) as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = centre - half as isize + i as isize;
                let x = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex::new(x * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, p) in power.iter_mut().enumerate() {
                let two_sided = if k == 0 || k == half { 1.0 } else { 2.0 };
                *p = two_sided * buf[k].norm_sqr() * norm;
            }
            for (b, (first, weights)) in self.bands.iter().enumerate() {
                out[f * N_MELS + b] = weights
                    .iter()
                    .zip(&power[*first..])
                    .map(|(w, p)| w * p)
                    .sum();
            }
        }
        out
    }

    /// Log band powers in dB, `[frames, N_MELS]`.
    pub fn log_mel(&self, samples: &[f64]) -> Tensor {
        let frames = self.frames_for(samples.len());
        let data = self
            .band_power(samples)
            .into_iter()
            .map(|p| 10.0 * (p + FLOOR).log10())
            .collect();
        Tensor::new(&[frames, N_MELS], data).expect("frames ≥ 1")
    }
}

/// Per-channel normalization statistics over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel running sums, accumulated in the order tensors are added.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    sum: Vec<f64>,
    sq: Vec<f64>,
    frames: usize,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            sum: vec![0.0; channels],
            sq: vec![0.0; channels],
            frames: 0,
        }
    }

    pub fn add(&mut self, features: &Tensor) -> Result<()> {
        let c = *features.shape().last().expect("rank ≥ 1");
        if c != self.sum.len() {
            return Err(MixerError::InvalidParameter(format!(
                "channel count {c} differs from {}",
                self.sum.len()
            )));
        }
        for row in features.data().chunks(c) {
            for (j, v) in row.iter().enumerate() {
                self.sum[j] += v;
                self.sq[j] += v * v;
            }
        }
        self.frames += features.numel() / c;
        Ok(())
    }

    /// Channels with (near) zero spread get unit std so normalization stays finite.
    pub fn finish(&self) -> Result<FeatureStats> {
        if self.frames == 0 {
            return Err(MixerError::InvalidParameter(
                "no frames to normalize".into(),
            ));
        }
        let n = self.frames as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s > 1e-6 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureStats { mean, std })
    }
}

impl FeatureStats {
    /// Mean and standard deviation per channel over every frame of `features`.
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut features = features.into_iter().peekable();
        let Some(first) = features.peek() else {
            return Err(MixerError::InvalidParameter(
                "no frames to normalize".into(),
            ));
        };
        let mut acc = StatsAccumulator::new(*first.shape().last().expect("rank ≥ 1"));
        for t in features {
            acc.add(t)?;
        }
        acc.finish()
    }

    fn check(&self, t: &Tensor) -> Result<usize> {
        let c = *t.shape().last().expect("rank ≥ 1");
        if c != self.mean.len() {
            return Err(MixerError::InvalidParameter(format!(
                "features have {c} channels, statistics cover {}",
                self.mean.len()
            )));
        }
        Ok(c)
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        let c = self.check(t)?;
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Ok(out)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        let c = self.check(t)?;
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        Ok(out)
    }
}
