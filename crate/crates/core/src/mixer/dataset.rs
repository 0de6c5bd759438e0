//! Pools, persisted datasets and their manifests.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl    one JSON record per mixture
//! dataset.json      normalization statistics, thresholds, settings
//! wav/<id>.wav      16-bit PCM mono
//! features/<id>.acft
//! ```
//!
//! Every mixture draws from its own ChaCha stream `(seed, index)`, so the
//! output does not depend on how many threads simulated it.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{FeatureStats, StatsAccumulator, HOP, N_MELS};
use super::{
    analysis, nld, simulate_mixture, synth_event, tenths, EventAnnotation, MixConfig, MixerError,
    Pool, Result, SourceClip, SynthClass, Thresholds,
};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";
const FEATURE_MAGIC: &[u8; 4] = b"ACFT";
/// Mixtures simulated per parallel batch; bounds peak memory.
const CHUNK: usize = 64;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MixerError + '_ {
    move |source| MixerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PoolSource {
    Synthetic,
    /// One subdirectory per label, each holding mono WAV clips.
    WavDir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub source: PoolSource,
    /// Synthetic classes to draw from.
    pub classes: Vec<SynthClass>,
    pub clips_per_class: usize,
    pub min_event_s: f64,
    pub max_event_s: f64,
    pub min_gain_db: f64,
    pub max_gain_db: f64,
    pub sample_rate: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            source: PoolSource::Synthetic,
            classes: SynthClass::ALL.to_vec(),
            clips_per_class: 64,
            min_event_s: 0.5,
            max_event_s: 4.0,
            min_gain_db: -40.0,
            max_gain_db: -16.0,
            sample_rate: super::SAMPLE_RATE,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MixerError::InvalidParameter(m));
        if self.source == PoolSource::Synthetic {
            if self.classes.is_empty() {
                return bad("no synthetic classes selected".into());
            }
            if self.clips_per_class * self.classes.len() < 4 {
                return bad("a pool needs at least 4 clips to categorize".into());
            }
        }
        let (Some(lo), Some(hi)) = (tenths(self.min_event_s), tenths(self.max_event_s)) else {
            return bad("event lengths must be multiples of 0.1 s".into());
        };
        let range = (super::synth::MIN_EVENT_S * 10.0).round() as u32
            ..=(super::synth::MAX_EVENT_S * 10.0) as u32;
        if lo > hi || !range.contains(&lo) || !range.contains(&hi) {
            return bad(format!(
                "event length range [{}, {}] s must lie in [{}, {}]",
                self.min_event_s,
                self.max_event_s,
                super::synth::MIN_EVENT_S,
                super::synth::MAX_EVENT_S
            ));
        }
        if !(self.min_gain_db <= self.max_gain_db
            && self.max_gain_db <= 0.0
            && self.min_gain_db.is_finite())
        {
            return bad(format!(
                "gain range [{}, {}] dB is invalid",
                self.min_gain_db, self.max_gain_db
            ));
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        Ok(())
    }
}

/// Builds and categorizes a pool. Synthetic clip `i` of class `c` uses stream
/// `c * clips_per_class + i` of `seed`.
pub fn build_pool(config: &PoolConfig, seed: u64) -> Result<Pool> {
    config.validate()?;
    let clips = match &config.source {
        PoolSource::Synthetic => {
            let per = config.clips_per_class;
            let (lo, hi) = (
                tenths(config.min_event_s).expect("validated"),
                tenths(config.max_event_s).expect("validated"),
            );
            (0..config.classes.len() * per)
                .into_par_iter()
                .map(|j| {
                    let class = config.classes[j / per];
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(j as u64);
                    let (plo, phi) = class.pitch_range();
                    let pitch = rng.gen_range(plo..=phi);
                    let gain = rng.gen_range(config.min_gain_db..=config.max_gain_db);
                    let dur = f64::from(rng.gen_range(lo..=hi)) / 10.0;
                    synth_event(class, pitch, gain, dur, config.sample_rate, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
        PoolSource::WavDir(dir) => read_wav_pool(dir, config.sample_rate)?,
    };
    Pool::from_clips(clips)
}

fn read_wav_pool(dir: &Path, sample_rate: u32) -> Result<Vec<SourceClip>> {
    let mut files = Vec::new();
    let mut labels: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    labels.sort();
    for label_dir in &labels {
        let label = label_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        nld::check_label(&label).map_err(|reason| MixerError::Format {
            path: label_dir.clone(),
            reason,
        })?;
        let mut wavs: Vec<PathBuf> = fs::read_dir(label_dir)
            .map_err(io_err(label_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        wavs.sort();
        files.extend(wavs.into_iter().map(|p| (label.clone(), p)));
    }
    if files.is_empty() {
        return Err(MixerError::Format {
            path: dir.to_path_buf(),
            reason: "no <label>/*.wav clips found".into(),
        });
    }
    files
        .into_par_iter()
        .map(|(label, path)| {
            let (samples, sr) = read_wav(&path)?;
            if sr != sample_rate {
                return Err(MixerError::Format {
                    path,
                    reason: format!("sample rate {sr} Hz, expected {sample_rate} Hz"),
                });
            }
            let mean_energy = analysis::estimate_energy(&samples, sr)?;
            if !mean_energy.is_finite() {
                return Err(MixerError::Format {
                    path,
                    reason: "silent clip".into(),
                });
            }
            let mean_pitch = analysis::estimate_pitch(&samples, sr)?;
            Ok(SourceClip {
                samples,
                sample_rate: sr,
                label,
                mean_pitch,
                mean_energy,
                pitch_category: super::Category::Normal,
                energy_category: super::Category::Normal,
            })
        })
        .collect()
}

/// Reads a mono WAV as floats in [−1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let fmt_err = |reason: String| MixerError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| fmt_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fmt_err(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = f64::from((1u32 << (spec.bits_per_sample - 1)) - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<Vec<_>, _>>()
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>(),
    }
    .map_err(|e| fmt_err(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let fmt_err = |e: hound::Error| MixerError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(fmt_err)?;
    for v in samples {
        w.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(fmt_err)?;
    }
    w.finalize().map_err(fmt_err)
}

/// `ACFT`, u32 frames, u32 channels, little-endian f32 row-major.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let &[frames, channels] = features.shape() else {
        return Err(MixerError::InvalidParameter(format!(
            "features must be 2-D, got {:?}",
            features.shape()
        )));
    };
    let mut buf = Vec::with_capacity(12 + 4 * features.numel());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |reason: String| MixerError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not an ACFT feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, channels) = (word(4), word(8));
    let expected = frames
        .checked_mul(channels)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12));
    if expected != Some(bytes.len()) {
        return Err(bad(format!(
            "{frames}×{channels} payload does not match file size {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&[frames, channels], data).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub wav: String,
    pub features: String,
    pub duration_s: f64,
    pub events: Vec<EventAnnotation>,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Accepts either the dataset directory or the manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let reader = BufReader::new(fs::File::open(&file).map_err(io_err(&file))?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&file))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| MixerError::Format {
                    path: file.clone(),
                    reason: format!("line {}: {e}", i + 1),
                })?;
            records.push(rec);
        }
        Ok(Self { dir, records })
    }

    /// Writes `manifest.jsonl` atomically after checking every referenced file exists.
    pub fn write(&self) -> Result<PathBuf> {
        self.write_as(MANIFEST_FILE)
    }

    /// Like [`Manifest::write`] under another file name in the same directory
    /// (e.g. a held-out split sharing the dataset's files).
    pub fn write_as(&self, file_name: &str) -> Result<PathBuf> {
        for r in &self.records {
            for p in [&r.wav, &r.features] {
                let full = self.dir.join(p);
                if !full.is_file() {
                    return Err(MixerError::Format {
                        path: full,
                        reason: format!("record {} references a missing file", r.id),
                    });
                }
            }
        }
        let path = self.dir.join(file_name);
        let tmp = self.dir.join(format!("{file_name}.partial"));
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io_err(&tmp))?);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(w, "{line}").map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
        drop(w);
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn features_path(&self, record: &ManifestRecord) -> PathBuf {
        self.dir.join(&record.features)
    }

    pub fn wav_path(&self, record: &ManifestRecord) -> PathBuf {
        self.dir.join(&record.wav)
    }

    /// Checks that captions and events agree for every record.
    pub fn check_captions(&self) -> Result<()> {
        for (index, r) in self.records.iter().enumerate() {
            let parsed = nld::parse_nld(&r.caption).map_err(|e| MixerError::Record {
                index,
                source: Box::new(e),
            })?;
            if parsed != r.events {
                return Err(MixerError::Record {
                    index,
                    source: Box::new(MixerError::Annotation(format!(
                        "{}: caption and events disagree",
                        r.id
                    ))),
                });
            }
        }
        Ok(())
    }
}

/// Settings and statistics shared by every record of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub count: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub channels: usize,
    pub frames: usize,
    pub duration_s: f64,
    /// Labels in pool order.
    pub labels: Vec<String>,
    /// Whether labels name synthetic classes (enables the rule-based detector).
    pub synthetic: bool,
    pub stats: FeatureStats,
    pub pitch_thresholds: Option<Thresholds>,
    pub energy_thresholds: Thresholds,
    pub mix: MixConfig,
}

impl DatasetInfo {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() {
            dir.join(INFO_FILE)
        } else {
            dir.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| MixerError::Format {
            path,
            reason: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(INFO_FILE);
        let text = serde_json::to_string_pretty(self).expect("info serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Deterministic per-mixture generator.
pub fn mixture_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Simulates `n` mixtures into `out_dir`. Features on disk are normalized
/// with statistics over the whole dataset. On failure, files written by this
/// call are removed and the error names the record.
pub fn build_dataset(
    pool: &Pool,
    mix: &MixConfig,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    mix.validate()?;
    if n == 0 {
        return Err(MixerError::InvalidParameter(
            "dataset size must be at least 1".into(),
        ));
    }
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(pool, mix, n, seed, out_dir, &mut written);
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

fn write_dataset(
    pool: &Pool,
    mix: &MixConfig,
    n: usize,
    seed: u64,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<Manifest> {
    for sub in ["wav", "features"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let sr = pool.sample_rate();
    let mut raw: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut sums = StatsAccumulator::new(N_MELS);
    let mut frames = 0;
    for chunk_start in (0..n).step_by(CHUNK) {
        let chunk: Vec<(usize, Result<super::Mixture>)> = (chunk_start
            ..(chunk_start + CHUNK).min(n))
            .into_par_iter()
            .map(|i| (i, simulate_mixture(pool, &mut mixture_rng(seed, i), mix)))
            .collect();
        for (index, m) in chunk {
            let wrap = |e: MixerError| MixerError::Record {
                index,
                source: Box::new(e),
            };
            let m = m.map_err(wrap)?;
            let id = format!("mix-{index:06}");
            let wav = format!("wav/{id}.wav");
            let wav_path = out_dir.join(&wav);
            written.push(wav_path.clone());
            write_wav(&wav_path, &m.samples, sr).map_err(wrap)?;
            sums.add(&m.features).map_err(wrap)?;
            frames = m.features.shape()[0];
            raw.push(m.features.data().iter().map(|v| *v as f32).collect());
            records.push(ManifestRecord {
                features: format!("features/{id}.acft"),
                id,
                wav,
                duration_s: m.duration_s,
                events: m.annotations,
                caption: m.caption,
            });
        }
    }
    let stats = sums.finish()?;
    for (index, (rec, feats)) in records.iter().zip(raw).enumerate() {
        let t = Tensor::new(
            &[frames, N_MELS],
            feats.into_iter().map(f64::from).collect(),
        )
        .expect("fixed shape");
        let path = out_dir.join(&rec.features);
        written.push(path.clone());
        write_features(&path, &stats.normalize(&t)?).map_err(|e| MixerError::Record {
            index,
            source: Box::new(e),
        })?;
    }
    let info = DatasetInfo {
        seed,
        count: n,
        sample_rate: sr,
        hop: HOP,
        channels: N_MELS,
        frames,
        duration_s: mix.duration_s,
        labels: pool.labels(),
        synthetic: pool
            .labels()
            .iter()
            .all(|l| l.parse::<SynthClass>().is_ok()),
        stats,
        pitch_thresholds: pool.pitch_thresholds(),
        energy_thresholds: pool.energy_thresholds(),
        mix: mix.clone(),
    };
    written.push(info.write(out_dir)?);
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        records,
    };
    written.push(out_dir.join(MANIFEST_FILE));
    manifest.write()?;
    Ok(manifest)
}
