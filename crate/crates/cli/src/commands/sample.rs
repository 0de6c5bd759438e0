use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use audiocomposer::metrics::{Detector, Registry};
use audiocomposer::mixer::dataset::{mixture_rng, INFO_FILE};
use audiocomposer::mixer::{write_features, write_wav, DatasetInfo, Manifest, ManifestRecord};
use audiocomposer::model::{load_checkpoint, Conditioning};
use audiocomposer::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

use crate::{io_err, resynth, CliError, Result, RunConfig};

/// Keeps the resynthesis stream apart from the noise stream of an item.
const RESYNTH_SALT: u64 = 0x2545_f491_4f6c_dd1d;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLine {
    /// Zero-based line number in the file; seeds the item.
    pub line: usize,
    pub id: String,
    pub caption: String,
}

/// One caption per line, optionally `id<TAB>caption`; blank lines and lines
/// starting with `#` are skipped. Unnamed items are called `gen-<line>`.
pub fn read_captions(path: &Path) -> Result<Vec<CaptionLine>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (line, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (id, caption) = match trimmed.split_once('\t') {
            Some((id, c)) => (id.trim().to_string(), c.trim().to_string()),
            None => (format!("gen-{line:06}"), trimmed.to_string()),
        };
        if !ids.insert(id.clone()) {
            return Err(CliError::Failed(format!(
                "{}:{}: duplicate id `{id}`",
                path.display(),
                line + 1
            )));
        }
        out.push(CaptionLine { line, id, caption });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub manifest: PathBuf,
    pub items: usize,
    pub events: usize,
    pub steps: usize,
}

/// Integrates the learned flow for every caption, then detects events in the
/// result and renders them to audio. Writes a manifest to the output
/// directory (default `generated`).
pub fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    captions: &Path,
    steps: Option<usize>,
    batch: usize,
) -> Result<SampleSummary> {
    let steps = steps.unwrap_or(cfg.sampler_steps);
    if steps == 0 || batch == 0 {
        return Err(CliError::Usage(
            "--steps and --batch must be at least 1".into(),
        ));
    }
    let (model, _) = load_checkpoint(checkpoint, None)?;
    let run_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let info = DatasetInfo::load(&run_dir.join(INFO_FILE))?;
    let lines = read_captions(captions)?;
    if lines.is_empty() {
        return Err(CliError::Failed(format!(
            "{}: no captions",
            captions.display()
        )));
    }
    let mut tokens = Vec::with_capacity(lines.len());
    for l in &lines {
        tokens.push(model.tokenize(&l.caption).map_err(|e| {
            CliError::Failed(format!("{}:{}: {e}", captions.display(), l.line + 1))
        })?);
    }
    let detector = if info.synthetic {
        Some(Detector {
            registry: Registry::synthetic(&info.labels, info.sample_rate)?,
            pitch: info.pitch_thresholds,
            energy: info.energy_thresholds,
        })
    } else {
        log::warn!("labels are not synthetic classes: no detection, silent audio");
        None
    };

    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("generated"));
    for sub in ["features", "wav"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let (frames, channels) = (info.frames, info.channels);
    let per_item = frames * channels;
    let mut records = Vec::with_capacity(lines.len());
    let mut events = 0;
    for (chunk, toks) in lines.chunks(batch).zip(tokens.chunks(batch)) {
        let mut eps = Vec::with_capacity(chunk.len() * per_item);
        for l in chunk {
            let mut rng = mixture_rng(cfg.seed, l.line);
            eps.extend((0..per_item).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        let eps = Tensor::new(&[chunk.len(), frames, channels], eps)?;
        let x = model.sample(&eps, steps, &Conditioning::Captions(toks.to_vec()))?;
        for (i, l) in chunk.iter().enumerate() {
            let feats = Tensor::new(
                &[frames, channels],
                x.data()[i * per_item..(i + 1) * per_item].to_vec(),
            )?;
            let features = format!("features/{}.acft", l.id);
            write_features(&out.join(&features), &feats)?;
            let detections = match &detector {
                Some(d) => d.detect(&info.stats.denormalize(&feats)?, info.duration_s)?,
                None => Vec::new(),
            };
            let mut rng = mixture_rng(cfg.seed ^ RESYNTH_SALT, l.line);
            let audio = resynth::render(&detections, info.duration_s, info.sample_rate, &mut rng)?;
            let wav = format!("wav/{}.wav", l.id);
            write_wav(&out.join(&wav), &audio, info.sample_rate)?;
            events += detections.len();
            records.push(ManifestRecord {
                id: l.id.clone(),
                wav,
                features,
                duration_s: info.duration_s,
                events: detections.iter().map(|d| d.annotation()).collect(),
                caption: l.caption.clone(),
            });
        }
        log::info!("{}/{} items", records.len(), lines.len());
    }
    let manifest = Manifest {
        dir: out.clone(),
        records,
    }
    .write()?;
    let summary = SampleSummary {
        manifest,
        items: lines.len(),
        events,
        steps,
    };
    println!(
        "{} items at {} steps, {} events detected -> {}",
        summary.items,
        summary.steps,
        summary.events,
        summary.manifest.display()
    );
    Ok(summary)
}
