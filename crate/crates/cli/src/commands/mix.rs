use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use audiocomposer::mixer::{build_dataset, build_pool, Category, Manifest, ManifestRecord};

use crate::{io_err, CliError, Result, RunConfig};

/// Held-out split written next to the training manifest.
pub const HELDOUT_MANIFEST: &str = "heldout.jsonl";
/// `id<TAB>caption` lines of the held-out split, ready for `sample`.
pub const HELDOUT_CAPTIONS: &str = "heldout.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct MixSummary {
    pub manifest: PathBuf,
    pub items: usize,
    pub heldout: usize,
    pub events: usize,
    pub classes: BTreeMap<String, usize>,
    /// Counts in `Category::ALL` order.
    pub pitch: [usize; 3],
    pub energy: [usize; 3],
}

impl MixSummary {
    fn of(manifest: PathBuf, records: &[ManifestRecord], heldout: usize) -> Self {
        let slot = |c: Category| Category::ALL.iter().position(|x| *x == c).expect("listed");
        let mut s = Self {
            manifest,
            items: records.len(),
            heldout,
            events: 0,
            classes: BTreeMap::new(),
            pitch: [0; 3],
            energy: [0; 3],
        };
        for e in records.iter().flat_map(|r| &r.events) {
            s.events += 1;
            *s.classes.entry(e.label.clone()).or_default() += 1;
            s.pitch[slot(e.pitch_category)] += 1;
            s.energy[slot(e.energy_category)] += 1;
        }
        s
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} items ({} held out), {} events -> {}",
            self.items,
            self.heldout,
            self.events,
            self.manifest.display()
        );
        let classes: Vec<String> = self
            .classes
            .iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect();
        let _ = writeln!(out, "classes: {}", classes.join(", "));
        for (name, counts) in [("pitch", self.pitch), ("energy", self.energy)] {
            let cells: Vec<String> = Category::ALL
                .iter()
                .zip(counts)
                .map(|(c, n)| format!("{c} {n}"))
                .collect();
            let _ = writeln!(out, "{name}: {}", cells.join(", "));
        }
        out
    }
}

/// Builds `n` mixtures into the output directory (default `data`). With
/// `mixer.holdout = k`, the last `k` records form a separate held-out split.
pub fn mix(cfg: &RunConfig, n: usize) -> Result<MixSummary> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if cfg.holdout >= n {
        return Err(CliError::Usage(format!(
            "mixer.holdout ({}) must be smaller than --n ({n})",
            cfg.holdout
        )));
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let pool = build_pool(&cfg.pool, cfg.seed)?;
    log::info!(
        "pool: {} clips over {} classes",
        pool.clips().len(),
        pool.labels().len()
    );
    let mut manifest = build_dataset(&pool, &cfg.mix, n, cfg.seed, &out)?;
    let mut heldout = Vec::new();
    if cfg.holdout > 0 {
        heldout = manifest.records.split_off(n - cfg.holdout);
        let split = Manifest {
            dir: manifest.dir.clone(),
            records: heldout.clone(),
        };
        split.write_as(HELDOUT_MANIFEST)?;
        let mut tsv = String::new();
        for r in &heldout {
            let _ = writeln!(tsv, "{}\t{}", r.id, r.caption);
        }
        let path = out.join(HELDOUT_CAPTIONS);
        fs::write(&path, tsv).map_err(io_err(&path))?;
        manifest.write()?;
    }
    let mut all = manifest.records.clone();
    all.extend(heldout);
    let summary = MixSummary::of(
        out.join(audiocomposer::mixer::dataset::MANIFEST_FILE),
        &all,
        cfg.holdout,
    );
    print!("{}", summary.render());
    Ok(summary)
}
