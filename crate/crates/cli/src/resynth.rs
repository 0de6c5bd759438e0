//! Template resynthesis: renders detected events back into a waveform with the
//! synthetic class recipes, so generated items can be listened to.

use audiocomposer::metrics::Detection;
use audiocomposer::mixer::simulate::clip_guard;
use audiocomposer::mixer::synth::{MAX_EVENT_S, MIN_EVENT_S};
use audiocomposer::mixer::{synth_event, MixerError, SynthClass};
use rand::Rng;

/// Quietest gain rendered; detections below it are clamped up.
const MIN_GAIN_DB: f64 = -80.0;

/// Sums one template per detection. Pitch and gain are clamped into what the
/// class recipe accepts; events longer than the recipe limit are rendered in
/// equal pieces.
pub fn render<R: Rng + ?Sized>(
    detections: &[Detection],
    duration_s: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Vec<f64>, MixerError> {
    let sr = f64::from(sample_rate);
    let mut out = vec![0.0; (duration_s * sr).round() as usize];
    for d in detections {
        let class: SynthClass = d.label.parse()?;
        let (lo, hi) = class.pitch_range();
        let pitch = d.pitch_hz.unwrap_or(0.5 * (lo + hi)).clamp(lo, hi);
        let gain = d.energy_db.clamp(MIN_GAIN_DB, 0.0);
        let total = d.end_s - d.start_s;
        let pieces = (total / MAX_EVENT_S).ceil().max(1.0) as usize;
        let piece_s = total / pieces as f64;
        for k in 0..pieces {
            let clip = synth_event(
                class,
                pitch,
                gain,
                piece_s.max(MIN_EVENT_S),
                sample_rate,
                rng,
            )?;
            let start = ((d.start_s + k as f64 * piece_s) * sr).round() as usize;
            let len = (piece_s * sr).round() as usize;
            for (o, s) in out
                .iter_mut()
                .skip(start)
                .zip(&clip.samples[..len.min(clip.samples.len())])
            {
                *o += s;
            }
        }
    }
    clip_guard(&mut out);
    Ok(out)
}
