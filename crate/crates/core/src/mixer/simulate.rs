//! Pools of categorized clips and mixture simulation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::MelFrontend;
use super::{
    categorize, nld, tenths, EventAnnotation, MixerError, Mixture, Result, SourceClip, Thresholds,
};

/// Clip draws per event before simulation gives up.
pub const PLACEMENT_RETRIES: usize = 20;
/// Mixes louder than full scale are rescaled to this peak (−1 dBFS).
pub const GUARD_PEAK: f64 = 0.891_250_938_133_745_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub min_events: usize,
    pub max_events: usize,
    /// Mixture length; on the 0.1 s grid and below 10 s.
    pub duration_s: f64,
    pub allow_overlap: bool,
    /// Silence kept between events when overlap is disallowed.
    pub min_gap_s: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            min_events: 1,
            max_events: 3,
            duration_s: 9.9,
            allow_overlap: true,
            min_gap_s: 0.2,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MixerError::InvalidParameter(m));
        if self.min_events == 0 || self.min_events > self.max_events {
            return bad(format!(
                "event count range {}..={} is empty or starts at 0",
                self.min_events, self.max_events
            ));
        }
        match tenths(self.duration_s) {
            Some(k) if (1..100).contains(&k) => {}
            _ => {
                return bad(format!(
                    "duration {} s must be a multiple of 0.1 s in (0, 10)",
                    self.duration_s
                ))
            }
        }
        if tenths(self.min_gap_s).is_none() {
            return bad(format!(
                "gap {} s must be a non-negative multiple of 0.1 s",
                self.min_gap_s
            ));
        }
        Ok(())
    }

    fn duration_tenths(&self) -> u32 {
        tenths(self.duration_s).expect("validated")
    }
}

/// Clips with categories assigned from the pool's own quartiles.
#[derive(Debug, Clone)]
pub struct Pool {
    clips: Vec<SourceClip>,
    /// `None` when fewer than four clips are pitched; then every clip is Normal.
    pitch: Option<Thresholds>,
    energy: Thresholds,
}

impl Pool {
    /// Pitch quartiles come from pitched clips only; unpitched clips are Normal.
    pub fn from_clips(mut clips: Vec<SourceClip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(MixerError::InvalidParameter("empty pool".into()));
        }
        if let Some(c) = clips.iter().find(|c| c.sample_rate != clips[0].sample_rate) {
            return Err(MixerError::InvalidParameter(format!(
                "{} clip at {} Hz in a {} Hz pool",
                c.label, c.sample_rate, clips[0].sample_rate
            )));
        }
        let energies: Vec<f64> = clips.iter().map(|c| c.mean_energy).collect();
        let (energy, _) = categorize(&energies)?;
        let pitches: Vec<f64> = clips.iter().filter_map(|c| c.mean_pitch).collect();
        let pitch = if pitches.len() >= 4 {
            Some(categorize(&pitches)?.0)
        } else {
            None
        };
        let pool = Self {
            clips: Vec::new(),
            pitch,
            energy,
        };
        for c in &mut clips {
            pool.assign(c);
        }
        Ok(Self { clips, ..pool })
    }

    /// Reuses stored thresholds for clips measured later.
    pub fn assign(&self, clip: &mut SourceClip) {
        clip.energy_category = self.energy.category(clip.mean_energy);
        clip.pitch_category = match (self.pitch, clip.mean_pitch) {
            (Some(t), Some(p)) => t.category(p),
            _ => super::Category::Normal,
        };
    }

    pub fn clips(&self) -> &[SourceClip] {
        &self.clips
    }

    pub fn sample_rate(&self) -> u32 {
        self.clips[0].sample_rate
    }

    pub fn pitch_thresholds(&self) -> Option<Thresholds> {
        self.pitch
    }

    pub fn energy_thresholds(&self) -> Thresholds {
        self.energy
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.clips {
            if !out.contains(&c.label) {
                out.push(c.label.clone());
            }
        }
        out
    }
}

/// Length of a clip on the 0.1 s grid, at least one step.
fn clip_tenths(clip: &SourceClip) -> u32 {
    ((clip.duration_s() * 10.0).round() as u32).max(1)
}

/// Sums clips at the given sample offsets, truncating at `len`.
pub fn place(events: &[(&SourceClip, usize)], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (clip, offset) in events {
        for (o, s) in out.iter_mut().skip(*offset).zip(&clip.samples) {
            *o += s;
        }
    }
    out
}

/// Rescales to [`GUARD_PEAK`] when the peak exceeds full scale.
pub fn clip_guard(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let g = GUARD_PEAK / peak;
        samples.iter_mut().for_each(|v| *v *= g);
    }
}

/// Rounds to the 16-bit grid used by WAV output.
pub fn quantize(samples: &mut [f64]) {
    for v in samples {
        *v = (v.clamp(-1.0, 1.0) * 32767.0).round() / 32767.0;
    }
}

pub fn simulate_mixture<R: Rng + ?Sized>(
    pool: &Pool,
    rng: &mut R,
    config: &MixConfig,
) -> Result<Mixture> {
    config.validate()?;
    let budget = config.duration_tenths();
    let gap = tenths(config.min_gap_s).expect("validated");
    let sr = pool.sample_rate();
    let k = rng.gen_range(config.min_events..=config.max_events);
    // Clips are drawn one at a time; a clip that does not fit (alone, or with
    // the gaps and clips already drawn in non-overlap mode) is redrawn.
    let mut drawn: Vec<(&SourceClip, u32)> = Vec::with_capacity(k);
    let mut used = 0;
    for _ in 0..k {
        let room = if config.allow_overlap {
            budget
        } else {
            budget.saturating_sub(used + if drawn.is_empty() { 0 } else { gap })
        };
        let mut last = None;
        let pick = (0..PLACEMENT_RETRIES).find_map(|_| {
            let clip = pool.clips.choose(rng).expect("non-empty pool");
            let len = clip_tenths(clip);
            last = Some((clip.label.clone(), len));
            (len <= room).then_some((clip, len))
        });
        let Some((clip, len)) = pick else {
            let (label, len) = last.expect("at least one attempt");
            return Err(MixerError::Placement {
                attempts: PLACEMENT_RETRIES,
                reason: format!(
                    "{label} clip of {:.1} s does not fit in the {:.1} s left",
                    f64::from(len) / 10.0,
                    f64::from(room) / 10.0
                ),
            });
        };
        used += len + if drawn.is_empty() { 0 } else { gap };
        drawn.push((clip, len));
    }
    // (clip, start, end) in tenths
    let mut chosen: Vec<(&SourceClip, u32, u32)> = if config.allow_overlap {
        drawn
            .into_iter()
            .map(|(c, len)| {
                let s = rng.gen_range(0..=budget - len);
                (c, s, s + len)
            })
            .collect()
    } else {
        // spread the slack over the k + 1 gaps around the events
        let slack = budget - used;
        let mut cuts: Vec<u32> = (0..k).map(|_| rng.gen_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut t = 0;
        let mut prev = 0;
        drawn
            .into_iter()
            .zip(cuts)
            .enumerate()
            .map(|(i, ((c, len), cut))| {
                t += cut - prev + if i == 0 { 0 } else { gap };
                prev = cut;
                let s = t;
                t += len;
                (c, s, s + len)
            })
            .collect()
    };
    chosen.sort_by_key(|&(_, s, _)| s);
    let n = (config.duration_s * f64::from(sr)).round() as usize;
    let offsets: Vec<(&SourceClip, usize)> = chosen
        .iter()
        .map(|&(c, s, _)| (c, (f64::from(s) / 10.0 * f64::from(sr)).round() as usize))
        .collect();
    let mut samples = place(&offsets, n);
    clip_guard(&mut samples);
    quantize(&mut samples);
    let annotations: Vec<EventAnnotation> = chosen
        .iter()
        .map(|&(c, s, e)| {
            EventAnnotation::new(c.label.clone(), s, e, c.pitch_category, c.energy_category)
        })
        .collect();
    let caption = nld::render_nld(&annotations)?;
    let features = if sr == super::SAMPLE_RATE {
        MelFrontend::standard().log_mel(&samples)
    } else {
        MelFrontend::new(sr).log_mel(&samples)
    };
    Ok(Mixture {
        samples,
        sample_rate: sr,
        duration_s: config.duration_s,
        annotations,
        caption,
        features,
    })
}
