use std::fs;
use std::path::{Path, PathBuf};

use audiocomposer::metrics::{evaluate_run, EvalContext, Report};
use audiocomposer::mixer::{DatasetInfo, Manifest};

use crate::{io_err, Result, RunConfig};

pub const REPORT_FILE: &str = "report.json";

/// Scores `generated` against `reference` (a dataset directory or a manifest
/// file inside one). Writes the report as JSON to the output directory
/// (default: the generated manifest's directory) and prints the table.
pub fn eval(cfg: &RunConfig, generated: &Path, reference: &Path) -> Result<(Report, PathBuf)> {
    let gen = Manifest::load(generated)?;
    let reference = Manifest::load(reference)?;
    let info = DatasetInfo::load(&reference.dir)?;
    let ctx = EvalContext::from_dataset(&info)?;
    let report = evaluate_run(&gen, &reference, &ctx)?;
    let out = cfg.out.clone().unwrap_or_else(|| gen.dir.clone());
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_json() + "\n").map_err(io_err(&path))?;
    print!("{}", report.table());
    log::info!("report written to {}", path.display());
    Ok((report, path))
}
