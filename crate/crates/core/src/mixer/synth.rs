//! Eight synthetic event classes with disjoint spectral footprints.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{analysis, Category, MixerError, Result, SourceClip};

pub const MIN_EVENT_S: f64 = 0.3;
pub const MAX_EVENT_S: f64 = 4.0;
const FADE_S: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SynthClass {
    /// Fundamental plus a half-amplitude second harmonic.
    Hum,
    /// Pure sine.
    Beep,
    /// Linear sweep across ±6% of the centre frequency.
    Chirp,
    /// Sine with 6 Hz amplitude modulation.
    Warble,
    /// Band-limited noise, ±10%.
    Whoosh,
    /// Band-limited noise, ±10%.
    Hiss,
    /// Band-limited noise, ±8%, with 12 Hz amplitude modulation.
    Rattle,
    /// Band-limited noise, ±5%.
    Sizzle,
}

impl SynthClass {
    pub const ALL: [SynthClass; 8] = [
        SynthClass::Hum,
        SynthClass::Beep,
        SynthClass::Chirp,
        SynthClass::Warble,
        SynthClass::Whoosh,
        SynthClass::Hiss,
        SynthClass::Rattle,
        SynthClass::Sizzle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Hum => "Hum",
            SynthClass::Beep => "Beep",
            SynthClass::Chirp => "Chirp",
            SynthClass::Warble => "Warble",
            SynthClass::Whoosh => "Whoosh",
            SynthClass::Hiss => "Hiss",
            SynthClass::Rattle => "Rattle",
            SynthClass::Sizzle => "Sizzle",
        }
    }

    /// Range of the characteristic frequency (fundamental or band centre), Hz.
    pub fn pitch_range(self) -> (f64, f64) {
        match self {
            SynthClass::Hum => (100.0, 160.0),
            SynthClass::Beep => (420.0, 600.0),
            SynthClass::Chirp => (850.0, 1050.0),
            SynthClass::Warble => (1450.0, 1750.0),
            SynthClass::Whoosh => (2250.0, 2450.0),
            SynthClass::Hiss => (3400.0, 3600.0),
            SynthClass::Rattle => (4900.0, 5100.0),
            SynthClass::Sizzle => (6900.0, 7100.0),
        }
    }

    /// Whether the class has a fundamental frequency.
    pub fn is_tonal(self) -> bool {
        matches!(
            self,
            SynthClass::Hum | SynthClass::Beep | SynthClass::Chirp | SynthClass::Warble
        )
    }

    fn noise_spread(self) -> f64 {
        match self {
            SynthClass::Whoosh | SynthClass::Hiss => 0.10,
            SynthClass::Rattle => 0.08,
            _ => 0.05,
        }
    }

    /// Frequencies (Hz) any event of this class can occupy.
    pub fn footprint(self) -> (f64, f64) {
        let (lo, hi) = self.pitch_range();
        match self {
            SynthClass::Hum => (lo * 0.98, 2.0 * hi * 1.02),
            SynthClass::Beep => (lo * 0.98, hi * 1.02),
            SynthClass::Chirp => (lo * 0.94, hi * 1.06),
            SynthClass::Warble => (lo * 0.98, hi * 1.02),
            _ => (
                lo * (1.0 - self.noise_spread()),
                hi * (1.0 + self.noise_spread()),
            ),
        }
    }

    /// Power-weighted spectral centroid divided by the characteristic frequency.
    pub fn centroid_ratio(self) -> f64 {
        match self {
            // (1·f + 0.25·2f) / 1.25
            SynthClass::Hum => 1.2,
            _ => 1.0,
        }
    }
}

impl fmt::Display for SynthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthClass {
    type Err = MixerError;

    fn from_str(s: &str) -> Result<Self> {
        SynthClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| MixerError::UnknownClass(s.to_string()))
    }
}

/// White noise restricted to `[lo, hi]` Hz by zeroing FFT bins.
fn band_noise<R: Rng + ?Sized>(n: usize, sr: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Renders one event and measures its mean pitch and energy. Categories are
/// left at `Normal` until the clip joins a pool.
pub fn synth_event<R: Rng + ?Sized>(
    class: SynthClass,
    pitch_hz: f64,
    gain_db: f64,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<SourceClip> {
    if !(MIN_EVENT_S..=MAX_EVENT_S).contains(&duration_s) {
        return Err(MixerError::InvalidParameter(format!(
            "duration {duration_s} s outside [{MIN_EVENT_S}, {MAX_EVENT_S}]"
        )));
    }
    let (lo, hi) = class.pitch_range();
    if !(lo..=hi).contains(&pitch_hz) {
        return Err(MixerError::InvalidParameter(format!(
            "{class} frequency {pitch_hz} Hz outside [{lo}, {hi}]"
        )));
    }
    if !gain_db.is_finite() || gain_db > 0.0 {
        return Err(MixerError::InvalidParameter(format!(
            "gain {gain_db} dB must be finite and ≤ 0"
        )));
    }
    let sr = f64::from(sample_rate);
    if class.footprint().1 >= sr / 2.0 {
        return Err(MixerError::InvalidParameter(format!(
            "{class} needs a sample rate above {sr}"
        )));
    }
    let n = (duration_s * sr).round() as usize;
    let phase: f64 = rng.gen_range(0.0..TAU);
    let tone = |i: usize, f: f64| (TAU * f * i as f64 / sr + phase).sin();
    let mut x: Vec<f64> = match class {
        SynthClass::Hum => {
            let p2: f64 = rng.gen_range(0.0..TAU);
            (0..n)
                .map(|i| {
                    tone(i, pitch_hz) + 0.5 * (TAU * 2.0 * pitch_hz * i as f64 / sr + p2).sin()
                })
                .collect()
        }
        SynthClass::Beep => (0..n).map(|i| tone(i, pitch_hz)).collect(),
        SynthClass::Chirp => {
            let (f0, f1) = (0.94 * pitch_hz, 1.06 * pitch_hz);
            let dur = n as f64 / sr;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (TAU * (f0 * t + 0.5 * (f1 - f0) * t * t / dur) + phase).sin()
                })
                .collect()
        }
        SynthClass::Warble => {
            let pm: f64 = rng.gen_range(0.0..TAU);
            (0..n)
                .map(|i| (1.0 + 0.5 * (TAU * 6.0 * i as f64 / sr + pm).sin()) * tone(i, pitch_hz))
                .collect()
        }
        SynthClass::Whoosh | SynthClass::Hiss | SynthClass::Rattle | SynthClass::Sizzle => {
            let w = class.noise_spread();
            let mut x = band_noise(n, sr, pitch_hz * (1.0 - w), pitch_hz * (1.0 + w), rng);
            if class == SynthClass::Rattle {
                let pm: f64 = rng.gen_range(0.0..TAU);
                for (i, v) in x.iter_mut().enumerate() {
                    *v *= 1.0 + 0.8 * (TAU * 12.0 * i as f64 / sr + pm).sin();
                }
            }
            x
        }
    };
    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let target = 10f64.powf(gain_db / 20.0);
    for v in &mut x {
        *v *= target / rms;
    }
    let mean_pitch = analysis::estimate_pitch(&x, sample_rate)?;
    let mean_energy = analysis::estimate_energy(&x, sample_rate)?;
    Ok(SourceClip {
        samples: x,
        sample_rate,
        label: class.name().to_string(),
        mean_pitch,
        mean_energy,
        pitch_category: Category::Normal,
        energy_category: Category::Normal,
    })
}
