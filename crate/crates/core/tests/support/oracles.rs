//! Brute-force references for the F1 metrics: every segment is enumerated and
//! every one-to-one assignment between reference and hypothesis events is tried.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

/// `(label, start, end)`.
pub type Ev = (String, f64, f64);

/// Per-label `(tp, fp, fn)` over all segments `[i·seg, (i+1)·seg)`.
pub fn segment_counts(
    reference: &[Ev],
    hypothesis: &[Ev],
    duration: f64,
    seg: f64,
) -> BTreeMap<String, (usize, usize, usize)> {
    let mut n = 0;
    while (n as f64) * seg < duration - 1e-9 {
        n += 1;
    }
    let mut out = BTreeMap::new();
    for (label, _, _) in reference.iter().chain(hypothesis) {
        let active = |list: &[Ev], i: usize| {
            list.iter()
                .any(|(l, s, e)| l == label && *s < (i + 1) as f64 * seg && *e > i as f64 * seg)
        };
        let mut c = (0, 0, 0);
        for i in 0..n {
            match (active(reference, i), active(hypothesis, i)) {
                (true, true) => c.0 += 1,
                (false, true) => c.1 += 1,
                (true, false) => c.2 += 1,
                _ => {}
            }
        }
        out.insert(label.clone(), c);
    }
    out
}

fn pair_ok(r: &Ev, h: &Ev, collar: f64) -> bool {
    r.0 == h.0
        && (r.1 - h.1).abs() <= collar + 1e-9
        && (r.2 - h.2).abs() <= collar.max(0.2 * (r.2 - r.1)) + 1e-9
}

/// Largest number of disjoint valid pairs, by exhaustive search.
pub fn best_matching(reference: &[Ev], hypothesis: &[Ev], collar: f64) -> Vec<Option<usize>> {
    fn go(
        i: usize,
        r: &[Ev],
        h: &[Ev],
        collar: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut (usize, Vec<Option<usize>>),
    ) {
        if i == r.len() {
            let n = cur.iter().flatten().count();
            if n > best.0 {
                *best = (n, cur.clone());
            }
            return;
        }
        cur.push(None);
        go(i + 1, r, h, collar, used, cur, best);
        cur.pop();
        for j in 0..h.len() {
            if !used[j] && pair_ok(&r[i], &h[j], collar) {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, r, h, collar, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, vec![None; reference.len()]);
    go(
        0,
        reference,
        hypothesis,
        collar,
        &mut vec![false; hypothesis.len()],
        &mut Vec::new(),
        &mut best,
    );
    best.1
}

pub fn event_counts(
    reference: &[Ev],
    hypothesis: &[Ev],
    collar: f64,
) -> BTreeMap<String, (usize, usize, usize)> {
    let m = best_matching(reference, hypothesis, collar);
    let mut out: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (i, r) in reference.iter().enumerate() {
        let c = out.entry(r.0.clone()).or_default();
        if m[i].is_some() {
            c.0 += 1;
        } else {
            c.2 += 1;
        }
    }
    for h in hypothesis {
        out.entry(h.0.clone()).or_default().1 += 1;
    }
    // every true positive was also counted as a hypothesis
    for c in out.values_mut() {
        c.1 -= c.0;
    }
    out
}

pub fn macro_f1(counts: &BTreeMap<String, (usize, usize, usize)>) -> f64 {
    let f: Vec<f64> = counts
        .values()
        .filter(|c| c.0 + c.1 + c.2 > 0)
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .collect();
    if f.is_empty() {
        1.0
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// A small random case: up to 4 labels, up to 6 events per side, 10 s clip,
/// times on the 0.1 s grid. Hypotheses are partly jittered references so
/// near-misses around the collar are common.
pub fn random_case<R: Rng>(rng: &mut R) -> (Vec<Ev>, Vec<Ev>) {
    let labels = ["A", "B", "C", "D"];
    let n_labels = rng.gen_range(1..=4);
    let event = |rng: &mut R| {
        let s = rng.gen_range(0..95u32);
        let e = rng.gen_range(s + 1..=(s + 40).min(100));
        (
            labels[rng.gen_range(0..n_labels)].to_string(),
            f64::from(s) / 10.0,
            f64::from(e) / 10.0,
        )
    };
    let reference: Vec<Ev> = (0..rng.gen_range(0..=6)).map(|_| event(rng)).collect();
    let mut hypothesis = Vec::new();
    for _ in 0..rng.gen_range(0..=6) {
        if !reference.is_empty() && rng.gen_bool(0.6) {
            let (l, s, e) = reference[rng.gen_range(0..reference.len())].clone();
            let ds = f64::from(rng.gen_range(-3i32..=3)) / 10.0;
            let de = f64::from(rng.gen_range(-4i32..=4)) / 10.0;
            let ns = ((s + ds) * 10.0).round().clamp(0.0, 99.0) / 10.0;
            let ne = ((e + de) * 10.0).round().clamp(ns * 10.0 + 1.0, 100.0) / 10.0;
            hypothesis.push((l, ns, ne));
        } else {
            hypothesis.push(event(rng));
        }
    }
    (reference, hypothesis)
}
