//! Segment-based and event-based F1.

use std::collections::{BTreeMap, BTreeSet};

use super::{Counts, Event, EventList, F1Score, MetricsError, Result};

/// Slack for comparing times that were rounded to the 0.1 s grid.
const TIME_EPS: f64 = 1e-9;

fn check(reference: &EventList, hypothesis: &EventList) -> Result<()> {
    if (reference.duration_s - hypothesis.duration_s).abs() > TIME_EPS {
        return Err(MetricsError::DurationMismatch {
            reference: reference.duration_s,
            hypothesis: hypothesis.duration_s,
        });
    }
    Ok(())
}

fn labels<'a>(a: &'a EventList, b: &'a EventList) -> BTreeSet<&'a str> {
    a.events
        .iter()
        .chain(&b.events)
        .map(|e| e.label.as_str())
        .collect()
}

/// Segments touched by `[start, end)`: segment `i` covers `[i·s, (i+1)·s)`.
fn active_segments(events: &[&Event], segment_s: f64, segments: usize) -> Vec<bool> {
    let mut active = vec![false; segments];
    for e in events {
        let first = (e.start_s / segment_s).floor().max(0.0) as usize;
        for (i, slot) in active.iter_mut().enumerate().skip(first) {
            let lo = i as f64 * segment_s;
            if lo >= e.end_s {
                break;
            }
            if e.start_s < lo + segment_s {
                *slot = true;
            }
        }
    }
    active
}

/// Cuts the clip into `segment_s` segments; per class, a segment is active
/// when any event overlaps it. Counts accumulate over segments.
pub fn segment_f1(
    reference: &EventList,
    hypothesis: &EventList,
    segment_s: f64,
) -> Result<F1Score> {
    check(reference, hypothesis)?;
    if !(segment_s.is_finite() && segment_s > 0.0) {
        return Err(MetricsError::InvalidParameter(format!(
            "segment length {segment_s} s"
        )));
    }
    let segments = ((reference.duration_s / segment_s) - TIME_EPS)
        .ceil()
        .max(1.0) as usize;
    let mut score = F1Score::default();
    for label in labels(reference, hypothesis) {
        let of = |l: &EventList| -> Vec<bool> {
            let ev: Vec<&Event> = l.events.iter().filter(|e| e.label == label).collect();
            active_segments(&ev, segment_s, segments)
        };
        let (r, h) = (of(reference), of(hypothesis));
        let mut c = Counts::default();
        for (r, h) in r.into_iter().zip(h) {
            match (r, h) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        score.classes.insert(label.to_string(), c);
    }
    Ok(score)
}

/// Same label, onsets within `collar`, offsets within `max(collar, 0.2 · reference length)`.
pub fn event_matches(reference: &Event, hypothesis: &Event, collar_s: f64) -> bool {
    let offset_tol = collar_s.max(0.2 * (reference.end_s - reference.start_s));
    reference.label == hypothesis.label
        && (reference.start_s - hypothesis.start_s).abs() <= collar_s + TIME_EPS
        && (reference.end_s - hypothesis.end_s).abs() <= offset_tol + TIME_EPS
}

/// Maximum one-to-one matching under [`event_matches`] (augmenting paths,
/// visited in list order), as `(reference index, hypothesis index)` pairs.
pub fn matched_pairs(
    reference: &[Event],
    hypothesis: &[Event],
    collar_s: f64,
) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = reference
        .iter()
        .map(|r| {
            (0..hypothesis.len())
                .filter(|&j| event_matches(r, &hypothesis[j], collar_s))
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; hypothesis.len()];

    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    for i in 0..reference.len() {
        let mut seen = vec![false; hypothesis.len()];
        augment(i, &adj, &mut seen, &mut owner);
    }
    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(j, o)| o.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Matched events are true positives, unmatched hypotheses false positives,
/// unmatched references false negatives.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0)` also rejects NaN
pub fn event_f1(reference: &EventList, hypothesis: &EventList, collar_s: f64) -> Result<F1Score> {
    check(reference, hypothesis)?;
    if !(collar_s >= 0.0) {
        return Err(MetricsError::InvalidParameter(format!(
            "collar {collar_s} s"
        )));
    }
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for e in &reference.events {
        per.entry(&e.label).or_default().0 += 1;
    }
    for e in &hypothesis.events {
        per.entry(&e.label).or_default().1 += 1;
    }
    let tp = matched_pairs(&reference.events, &hypothesis.events, collar_s);
    let mut score = F1Score::default();
    for (label, (n_ref, n_hyp)) in per {
        let t = tp
            .iter()
            .filter(|(i, _)| reference.events[*i].label == label)
            .count();
        score.classes.insert(
            label.to_string(),
            Counts {
                tp: t,
                fp: n_hyp - t,
                fn_: n_ref - t,
            },
        );
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(events: &[(&str, f64, f64)]) -> EventList {
        EventList::new(
            events
                .iter()
                .map(|&(l, s, e)| Event::new(l, s, e))
                .collect(),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn worked_segment_example() {
        let s = segment_f1(&list(&[("A", 0.0, 3.0)]), &list(&[("A", 2.0, 5.0)]), 1.0).unwrap();
        assert_eq!(
            s.classes["A"],
            Counts {
                tp: 1,
                fp: 2,
                fn_: 2
            }
        );
        assert_eq!(s.macro_f1(), 1.0 / 3.0);
    }

    #[test]
    fn identity_and_empty() {
        let r = list(&[("A", 0.5, 2.0), ("B", 4.0, 9.9)]);
        assert_eq!(segment_f1(&r, &r, 1.0).unwrap().macro_f1(), 1.0);
        assert_eq!(event_f1(&r, &r, 0.2).unwrap().macro_f1(), 1.0);
        let empty = list(&[]);
        assert_eq!(segment_f1(&r, &empty, 1.0).unwrap().macro_f1(), 0.0);
        assert_eq!(event_f1(&r, &empty, 0.2).unwrap().macro_f1(), 0.0);
    }

    #[test]
    fn onset_outside_collar_is_unmatched() {
        let r = list(&[("A", 1.0, 3.0)]);
        let h = list(&[("A", 1.5, 3.0)]);
        assert_eq!(
            event_f1(&r, &h, 0.2).unwrap().classes["A"],
            Counts {
                tp: 0,
                fp: 1,
                fn_: 1
            }
        );
    }

    #[test]
    fn three_refs_two_hyps_one_match() {
        let r = list(&[("A", 0.0, 1.0), ("A", 3.0, 4.0), ("A", 6.0, 7.0)]);
        let h = list(&[("A", 0.1, 1.1), ("A", 8.0, 9.0)]);
        let c = event_f1(&r, &h, 0.2).unwrap().classes["A"];
        assert_eq!((c.precision(), c.recall()), (Some(0.5), Some(1.0 / 3.0)));
        assert!((c.f1().unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn matching_is_maximum_not_greedy() {
        // greedy in list order would pair r0 with h0 and strand r1
        let r = list(&[("A", 1.0, 2.0), ("A", 1.3, 2.3)]);
        let h = list(&[("A", 1.15, 2.15), ("A", 0.85, 1.85)]);
        assert_eq!(matched_pairs(&r.events, &h.events, 0.2).len(), 2);
    }

    #[test]
    fn rejects_mismatched_durations() {
        let a = list(&[]);
        let b = EventList::new(vec![], 5.0).unwrap();
        assert!(matches!(
            segment_f1(&a, &b, 1.0),
            Err(MetricsError::DurationMismatch { .. })
        ));
        assert!(matches!(
            event_f1(&a, &b, 0.2),
            Err(MetricsError::DurationMismatch { .. })
        ));
        assert!(EventList::new(vec![Event::new("A", 2.0, 1.0)], 5.0).is_err());
    }

    fn events() -> impl Strategy<Value = EventList> {
        let e = (0usize..3, 0u32..99, 1u32..40).prop_map(|(l, s, d)| {
            let end = (s + d).min(100);
            Event::new(
                ["A", "B", "C"][l],
                f64::from(s) / 10.0,
                f64::from(end) / 10.0,
            )
        });
        prop::collection::vec(e, 0..6).prop_map(|v| EventList::new(v, 10.0).unwrap())
    }

    proptest! {
        #[test]
        fn swap_exchanges_precision_and_recall(a in events(), b in events()) {
            let ab = segment_f1(&a, &b, 1.0).unwrap();
            let ba = segment_f1(&b, &a, 1.0).unwrap();
            for (label, c) in &ab.classes {
                let d = ba.classes[label];
                prop_assert_eq!((c.tp, c.fp, c.fn_), (d.tp, d.fn_, d.fp));
            }
            prop_assert!((0.0..=1.0).contains(&ab.macro_f1()));
            // with an unbounded collar the offset tolerance no longer depends on
            // which side is the reference
            let eab = event_f1(&a, &b, f64::INFINITY).unwrap();
            let eba = event_f1(&b, &a, f64::INFINITY).unwrap();
            for (label, c) in &eab.classes {
                prop_assert_eq!(c.tp, eba.classes[label].tp);
            }
            prop_assert!((0.0..=1.0).contains(&event_f1(&a, &b, 0.2).unwrap().macro_f1()));
        }

        #[test]
        fn unbounded_collar_counts_per_class(a in events(), b in events()) {
            let s = event_f1(&a, &b, f64::INFINITY).unwrap();
            for (label, c) in &s.classes {
                let n = |l: &EventList| l.events.iter().filter(|e| &e.label == label).count();
                prop_assert_eq!(c.tp, n(&a).min(n(&b)));
            }
        }
    }
}
