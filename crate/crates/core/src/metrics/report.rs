//! Scoring a generated run against its reference dataset.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    category_accuracy, contour_error, event_f1, segment_f1, AbsError, Accuracy, Detector,
    EventList, F1Score, MetricsError, Registry, Result, DEFAULT_COLLAR_S, DEFAULT_SEGMENT_S,
};
use crate::mixer::{read_features, DatasetInfo, EventAnnotation, FeatureStats, Manifest};

/// Everything needed to turn stored (normalized) features into scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    pub detector: Detector,
    pub stats: FeatureStats,
    pub segment_s: f64,
    pub collar_s: f64,
}

impl EvalContext {
    /// Requires a dataset built from synthetic classes.
    pub fn from_dataset(info: &DatasetInfo) -> Result<Self> {
        Ok(Self {
            detector: Detector {
                registry: Registry::synthetic(&info.labels, info.sample_rate)?,
                pitch: info.pitch_thresholds,
                energy: info.energy_thresholds,
            },
            stats: info.stats.clone(),
            segment_s: DEFAULT_SEGMENT_S,
            collar_s: DEFAULT_COLLAR_S,
        })
    }
}

/// Pairs each reference event with at most one hypothesis of the same label,
/// largest temporal overlap first (ties by list order).
pub fn align_events(
    reference: &[EventAnnotation],
    hypothesis: &[EventAnnotation],
) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in reference.iter().enumerate() {
        for (j, h) in hypothesis.iter().enumerate() {
            let overlap = r.end_s.min(h.end_s) - r.start_s.max(h.start_s);
            if r.label == h.label && overlap > 0.0 {
                pairs.push((overlap, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; reference.len()];
    let mut taken = vec![false; hypothesis.len()];
    for (_, i, j) in pairs {
        if out[i].is_none() && !taken[j] {
            out[i] = Some(j);
            taken[j] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub items: usize,
    pub segment: F1Score,
    pub event: F1Score,
    pub f1_seg: f64,
    pub f1_event: f64,
    pub pitch: Accuracy,
    pub energy: Accuracy,
    pub pitch_acc: Option<f64>,
    pub energy_acc: Option<f64>,
    pub pitch_mae: Option<f64>,
    pub energy_mae: Option<f64>,
}

#[derive(Default)]
struct ItemScore {
    segment: F1Score,
    event: F1Score,
    pitch: Accuracy,
    energy: Accuracy,
    pitch_err: AbsError,
    energy_err: AbsError,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| MetricsError::InvalidParameter(format!("report: {e}")))
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| {
            v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
        };
        let header = [
            "items",
            "F1_seg",
            "F1_event",
            "pitch ACC",
            "pitch MAE (Hz)",
            "energy ACC",
            "energy MAE (dB)",
        ];
        let row = [
            self.items.to_string(),
            format!("{:.3}", self.f1_seg),
            format!("{:.3}", self.f1_event),
            opt(self.pitch_acc, 3),
            opt(self.pitch_mae, 1),
            opt(self.energy_acc, 3),
            opt(self.energy_mae, 2),
        ];
        let mut out = String::new();
        for cells in [header.map(str::to_string), row] {
            let line: Vec<String> = cells
                .iter()
                .zip(header)
                .map(|(c, h)| format!("{c:>w$}", w = h.len()))
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }
}

fn score_item(
    generated: &Manifest,
    reference: &Manifest,
    gi: usize,
    ri: usize,
    ctx: &EvalContext,
) -> Result<ItemScore> {
    let (g, r) = (&generated.records[gi], &reference.records[ri]);
    let ref_list = EventList::from_annotations(&r.events, r.duration_s)?;
    let hyp_list = EventList::from_annotations(&g.events, g.duration_s)?;
    let align = align_events(&r.events, &g.events);
    let ref_p: Vec<_> = r.events.iter().map(|e| e.pitch_category).collect();
    let ref_e: Vec<_> = r.events.iter().map(|e| e.energy_category).collect();
    let hyp_p: Vec<_> = align
        .iter()
        .map(|a| a.map(|j| g.events[j].pitch_category))
        .collect();
    let hyp_e: Vec<_> = align
        .iter()
        .map(|a| a.map(|j| g.events[j].energy_category))
        .collect();
    let load = |m: &Manifest, rec| -> Result<_> {
        let raw = ctx
            .stats
            .denormalize(&read_features(&m.features_path(rec))?)?;
        ctx.detector.contours(&raw)
    };
    let (rp, re) = load(reference, r)?;
    let (gp, ge) = load(generated, g)?;
    Ok(ItemScore {
        segment: segment_f1(&ref_list, &hyp_list, ctx.segment_s)?,
        event: event_f1(&ref_list, &hyp_list, ctx.collar_s)?,
        pitch: category_accuracy(&ref_p, &hyp_p)?,
        energy: category_accuracy(&ref_e, &hyp_e)?,
        pitch_err: contour_error(&rp, &gp)?,
        energy_err: contour_error(&re, &ge)?,
    })
}

/// Scores every reference item against the generated item with the same id.
/// Items are scored in parallel and pooled in reference order.
pub fn evaluate_run(
    generated: &Manifest,
    reference: &Manifest,
    ctx: &EvalContext,
) -> Result<Report> {
    let gen_ids: BTreeSet<&str> = generated.records.iter().map(|r| r.id.as_str()).collect();
    let ref_ids: BTreeSet<&str> = reference.records.iter().map(|r| r.id.as_str()).collect();
    if gen_ids != ref_ids
        || gen_ids.len() != generated.records.len()
        || ref_ids.len() != reference.records.len()
    {
        return Err(MetricsError::MissingIds {
            missing_generated: ref_ids
                .difference(&gen_ids)
                .map(|s| s.to_string())
                .collect(),
            missing_reference: gen_ids
                .difference(&ref_ids)
                .map(|s| s.to_string())
                .collect(),
        });
    }
    let scores: Vec<ItemScore> = reference
        .records
        .par_iter()
        .enumerate()
        .map(|(ri, r)| {
            let gi = generated
                .records
                .iter()
                .position(|g| g.id == r.id)
                .expect("ids checked");
            score_item(generated, reference, gi, ri, ctx)
        })
        .collect::<Result<_>>()?;
    let mut total = ItemScore::default();
    for s in &scores {
        total.segment.merge(&s.segment);
        total.event.merge(&s.event);
        total.pitch.merge(s.pitch);
        total.energy.merge(s.energy);
        total.pitch_err.merge(s.pitch_err);
        total.energy_err.merge(s.energy_err);
    }
    Ok(Report {
        items: scores.len(),
        f1_seg: total.segment.macro_f1(),
        f1_event: total.event.macro_f1(),
        pitch_acc: total.pitch.fraction(),
        energy_acc: total.energy.fraction(),
        pitch_mae: total.pitch_err.mean(),
        energy_mae: total.energy_err.mean(),
        segment: total.segment,
        event: total.event,
        pitch: total.pitch,
        energy: total.energy,
    })
}
