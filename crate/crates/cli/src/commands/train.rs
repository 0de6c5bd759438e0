use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use audiocomposer::mixer::{read_features, DatasetInfo, Manifest};
use audiocomposer::model::{
    load_checkpoint, load_optimizer, save_optimizer, AdamW, AdamWConfig, Model, ModelError,
    TrainItem, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{io_err, CliError, ConfigError, Result, RunConfig};

pub const MODEL_FILE: &str = "model.acmp";
pub const OPTIMIZER_FILE: &str = "optimizer.acmp";
/// One `step<TAB>loss` line per completed step.
pub const LOSS_FILE: &str = "loss.tsv";
/// Separates the batch-drawing stream from the noise stream of the same seed.
const BATCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    /// Completed optimizer steps.
    pub steps: u64,
    /// `(step, loss)` as logged: the first step, then window means.
    pub logged: Vec<(u64, f64)>,
    pub seconds_per_step: f64,
}

/// Writes through a temporary name so an interrupted save never leaves a
/// truncated checkpoint behind.
fn save(out: &Path, model: &Model, opt: &AdamW, meta: &BTreeMap<String, String>) -> Result<()> {
    let tmp_model = out.join(format!("{MODEL_FILE}.partial"));
    let tmp_opt = out.join(format!("{OPTIMIZER_FILE}.partial"));
    model.save_checkpoint(&tmp_model, meta)?;
    save_optimizer(&tmp_opt, opt, model)?;
    for (tmp, name) in [(tmp_model, MODEL_FILE), (tmp_opt, OPTIMIZER_FILE)] {
        let dst = out.join(name);
        fs::rename(&tmp, &dst).map_err(io_err(&dst))?;
    }
    Ok(())
}

/// Loss lines up to and including `step`, so a resumed run continues the file.
fn kept_losses(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let s = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        if s.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Trains on every record of `data` until `train.steps` optimizer steps are
/// complete, writing checkpoints and the loss log to the output directory
/// (default `run`).
pub fn train(cfg: &RunConfig, data: &Path, resume: bool) -> Result<TrainSummary> {
    let info = DatasetInfo::load(data)?;
    let manifest = Manifest::load(data)?;
    if manifest.records.is_empty() {
        return Err(CliError::Failed(format!(
            "{}: manifest has no records",
            data.display()
        )));
    }
    let vocab = Vocabulary::for_labels(&info.labels);
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    mc.feature_channels = info.channels;
    mc.validate()?;
    if info.frames > mc.max_frames {
        return Err(ConfigError::Invalid(format!(
            "dataset has {} frames but model.max_frames is {}",
            info.frames, mc.max_frames
        ))
        .into());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let model_path = out.join(MODEL_FILE);
    if !resume && model_path.exists() {
        return Err(CliError::Usage(format!(
            "{} exists; pass --resume or choose another --out",
            model_path.display()
        )));
    }

    let mut items = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        items.push(TrainItem {
            features: read_features(&manifest.features_path(r))?,
            tokens: Some(vocab.encode(&r.caption)?),
        });
    }
    log::info!(
        "{} items of {}x{} from {}",
        items.len(),
        info.frames,
        info.channels,
        data.display()
    );

    let (mut model, mut opt) = if resume {
        let (model, _) = load_checkpoint(&model_path, Some(&mc))?;
        if model.vocabulary() != &vocab {
            return Err(CliError::Failed(format!(
                "{}: vocabulary differs from the dataset's",
                model_path.display()
            )));
        }
        let opt = load_optimizer(out.join(OPTIMIZER_FILE), &model)?;
        log::info!("resuming at step {}", opt.step);
        (model, opt)
    } else {
        let model = Model::new(mc, vocab, cfg.seed)?;
        let opt = AdamW::new(
            AdamWConfig {
                lr: cfg.train.lr,
                weight_decay: cfg.train.weight_decay,
                ..AdamWConfig::default()
            },
            model.parameters(),
        );
        (model, opt)
    };
    log::info!("{} parameters", model.parameter_count());

    fs::create_dir_all(&out).map_err(io_err(&out))?;
    info.write(&out)?;
    let loss_path = out.join(LOSS_FILE);
    let previous = if resume {
        kept_losses(&loss_path, opt.step)?
    } else {
        String::new()
    };
    let mut losses = BufWriter::new(fs::File::create(&loss_path).map_err(io_err(&loss_path))?);
    losses
        .write_all(previous.as_bytes())
        .map_err(io_err(&loss_path))?;

    let meta: BTreeMap<String, String> = [
        ("seed", cfg.seed.to_string()),
        ("schedule", cfg.schedule.to_string()),
        ("data", data.display().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let started = Instant::now();
    let first = opt.step;
    let mut logged = Vec::new();
    let (mut window, mut window_n) = (0.0, 0u64);
    while opt.step < cfg.train.steps {
        let step = opt.step;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SALT);
        rng.set_stream(step);
        let batch: Vec<TrainItem> = (0..cfg.train.batch_size)
            .map(|_| items[rng.gen_range(0..items.len())].clone())
            .collect();
        let loss = match model.train_step(&mut opt, &batch, cfg.seed, cfg.schedule) {
            Ok(l) => l,
            Err(ModelError::NonFinite(what)) => {
                losses.flush().map_err(io_err(&loss_path))?;
                return Err(CliError::Failed(format!(
                    "non-finite {what} at step {}; parameters unchanged, \
                     last checkpoint is the one in {}",
                    step + 1,
                    out.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let done = opt.step;
        writeln!(losses, "{done}\t{loss}").map_err(io_err(&loss_path))?;
        window += loss;
        window_n += 1;
        let rate = started.elapsed().as_secs_f64() / (done - first) as f64;
        if done == 1 {
            log::info!("step {done} loss {loss:.4}");
            logged.push((done, loss));
        }
        if done % cfg.train.log_every == 0 {
            let mean = window / window_n as f64;
            log::info!("step {done} loss {mean:.4} ({rate:.3} s/step)");
            logged.push((done, mean));
            (window, window_n) = (0.0, 0);
        }
        if done % cfg.train.checkpoint_every == 0 || done == cfg.train.steps {
            save(&out, &model, &opt, &meta)?;
            losses.flush().map_err(io_err(&loss_path))?;
            log::debug!("checkpoint at step {done}");
        }
    }
    losses.flush().map_err(io_err(&loss_path))?;
    if opt.step == first {
        // nothing to do, but leave a loadable checkpoint behind
        save(&out, &model, &opt, &meta)?;
    }
    let ran = (opt.step - first).max(1);
    let summary = TrainSummary {
        checkpoint: model_path,
        steps: opt.step,
        logged,
        seconds_per_step: started.elapsed().as_secs_f64() / ran as f64,
    };
    println!(
        "trained to step {} ({:.3} s/step) -> {}",
        summary.steps,
        summary.seconds_per_step,
        summary.checkpoint.display()
    );
    if let (Some(a), Some(b)) = (summary.logged.first(), summary.logged.last()) {
        println!(
            "loss {:.4} at step {} -> {:.4} at step {}",
            a.1, a.0, b.1, b.0
        );
    }
    Ok(summary)
}
