use std::fmt::Write as _;

use audiocomposer::flow::Schedule;
use audiocomposer::model::{Conditioning, Model, ModelConfig, ModelError, Vocabulary};
use audiocomposer::tensor::gradcheck::{check_op, grad_check_inputs, CheckOptions, GradCheck};
use audiocomposer::tensor::{OpKind, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{CliError, Result, RunConfig};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per parameter tensor in the end-to-end check.
const E2E_COORDS: usize = 4;
/// Central-difference step for the end-to-end check. Four stacked blocks have
/// enough curvature that the O(h²) error at the per-op step of 1e-3 reaches
/// the tolerance; 1e-4 keeps it two orders below, with round-off near 1e-12.
const E2E_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub instances: u64,
    pub max_rel_error: f64,
    /// Seed of the worst instance.
    pub worst_seed: u64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut out = format!(
        "{:<width$}  instances  max rel error  worst seed  result\n",
        "op"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>13.3e}  {:>10}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            r.worst_seed,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}

/// Block structure of `model` at widths small enough for finite differences:
/// 4 frames, 2 caption tokens, 4 channels, head dimension 4.
fn e2e_config(model: &ModelConfig, vocab: usize) -> ModelConfig {
    ModelConfig {
        num_blocks: model.num_blocks,
        hidden_dim: 4 * model.num_heads,
        num_heads: model.num_heads,
        feature_channels: 4,
        vocab_size: vocab,
        max_frames: 4,
        time_embed_dim: 8,
        mlp_ratio: model.mlp_ratio,
        max_tokens: 8,
    }
}

/// Full flow-matching objective with respect to every parameter tensor.
pub fn check_end_to_end(
    model: &ModelConfig,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<GradCheck> {
    let vocab = Vocabulary::for_labels(&["Hum", "Beep"]);
    let mut m = Model::new(e2e_config(model, vocab.len()), vocab, seed)?;
    // move zero-initialized gates and modulation off zero so every path carries gradient
    m.perturb(0.2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn =
        |shape: &[usize]| Tensor::from_fn(shape, |_| -> f64 { StandardNormal.sample(&mut rng) });
    let x0 = randn(&[1, 4, 4])?;
    let eps = randn(&[1, 4, 4])?;
    let tokens = m.tokenize("Hum, Start at 0.1s")?;
    let cond = Conditioning::Captions(vec![tokens[..2].to_vec()]);
    let t = 0.05 + 0.9 * (seed % 97) as f64 / 97.0;
    let points: Vec<Tensor> = m.parameters().iter().map(|p| p.as_ref().clone()).collect();
    let report = grad_check_inputs(
        |g, p| {
            m.cfm_objective(g, p, &x0, &eps, &[t], &cond, Schedule::Linear)
                .map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::InvalidShape {
                        op: "cfm_objective",
                        shape: vec![],
                        reason: other.to_string(),
                    },
                })
        },
        &points,
        CheckOptions {
            max_coords: Some(E2E_COORDS),
            fault,
            step: E2E_STEP,
        },
    )?;
    Ok(report)
}

pub fn parse_fault(name: &str) -> Result<OpKind> {
    OpKind::DIFFERENTIABLE
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::Usage(format!("--fault: no operation named `{name}`")))
}

/// Checks every differentiable operation and the end-to-end objective on
/// `instances` seeded cases each. Any failure is an error after the table
/// has been printed.
pub fn gradcheck(cfg: &RunConfig, instances: u64, fault: Option<&str>) -> Result<Vec<CheckRow>> {
    if instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let fault = fault.map(parse_fault).transpose()?;
    let options = CheckOptions {
        fault,
        ..CheckOptions::default()
    };
    let mut rows = Vec::new();
    let worst = |name: &str, results: Vec<(u64, GradCheck)>| {
        let (seed, r) = results
            .into_iter()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .expect("at least one instance");
        CheckRow {
            name: name.to_string(),
            instances,
            max_rel_error: r.max_rel_error,
            worst_seed: seed,
        }
    };
    for kind in OpKind::DIFFERENTIABLE {
        let mut results = Vec::new();
        for seed in cfg.seed..cfg.seed + instances {
            results.push((seed, check_op(kind, seed, options)?));
        }
        rows.push(worst(kind.name(), results));
    }
    let mut results = Vec::new();
    for seed in cfg.seed..cfg.seed + instances {
        results.push((seed, check_end_to_end(&cfg.model, seed, fault)?));
    }
    rows.push(worst("cfm end-to-end", results));
    print!("{}", render_table(&rows));
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(rows)
}
