//! Checks over scheduler traces of round-pipelined shuffles.
//!
//! Map tasks are labelled `map-{i}` (round `i / P`) and merge tasks
//! `merge-{round}-{node}`.

use std::collections::{BTreeMap, HashMap};

use crate::runtime::trace::{EventKind, SchedulerTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Map,
    Merge,
}

fn classify(label: &str, p: usize) -> Option<(Stage, usize)> {
    if let Some(i) = label.strip_prefix("map-") {
        return i.parse::<usize>().ok().map(|i| (Stage::Map, i / p.max(1)));
    }
    let rest = label.strip_prefix("merge-")?;
    let (k, _node) = rest.split_once('-')?;
    k.parse().ok().map(|k| (Stage::Merge, k))
}

/// Execution intervals `[start, end]` in microseconds, per (stage, round).
fn intervals(trace: &SchedulerTrace, p: usize) -> BTreeMap<(Stage, usize), Vec<(u64, u64)>> {
    let mut open: HashMap<(String, Option<u32>), (Stage, usize, u64)> = HashMap::new();
    let mut out: BTreeMap<(Stage, usize), Vec<(u64, u64)>> = BTreeMap::new();
    for e in &trace.events {
        let Some(label) = &e.label else { continue };
        let Some((stage, round)) = classify(label, p) else {
            continue;
        };
        let key = (e.subject.clone(), e.attempt);
        match e.kind {
            EventKind::TaskStarted => {
                open.insert(key, (stage, round, e.ts_us));
            }
            EventKind::TaskFinished | EventKind::TaskCancelled | EventKind::TaskRetried => {
                if let Some((s, r, t0)) = open.remove(&key) {
                    out.entry((s, r)).or_default().push((t0, e.ts_us));
                }
            }
            _ => {}
        }
    }
    let end = trace.events.last().map_or(0, |e| e.ts_us);
    for (_, (s, r, t0)) in open {
        out.entry((s, r)).or_default().push((t0, end));
    }
    out
}

/// Largest number of distinct merge rounds with a task executing at the
/// same instant.
pub fn max_merge_rounds_in_flight(trace: &SchedulerTrace, p: usize) -> usize {
    // Sweep over (time, +1/-1, round); ends sort before starts at equal times.
    let mut events = Vec::new();
    for ((stage, round), ivs) in intervals(trace, p) {
        if stage != Stage::Merge {
            continue;
        }
        for (a, b) in ivs {
            events.push((a, 1i32, round));
            events.push((b, -1, round));
        }
    }
    events.sort_by_key(|&(t, d, _)| (t, d));
    let mut running: BTreeMap<usize, i32> = BTreeMap::new();
    let mut best = 0;
    for (_, d, round) in events {
        let c = running.entry(round).or_insert(0);
        *c += d;
        if *c == 0 {
            running.remove(&round);
        }
        best = best.max(running.len());
    }
    best
}

/// Number of rounds `k` for which some map task of round `k + 1` executed
/// while a merge task of round `k` was executing.
pub fn map_merge_overlaps(trace: &SchedulerTrace, p: usize) -> usize {
    let iv = intervals(trace, p);
    let merge_rounds: Vec<usize> = iv
        .keys()
        .filter(|(s, _)| *s == Stage::Merge)
        .map(|(_, r)| *r)
        .collect();
    merge_rounds
        .into_iter()
        .filter(|&k| {
            let (Some(merges), Some(maps)) =
                (iv.get(&(Stage::Merge, k)), iv.get(&(Stage::Map, k + 1)))
            else {
                return false;
            };
            merges
                .iter()
                .any(|&(a, b)| maps.iter().any(|&(c, d)| a < d && c < b))
        })
        .count()
}
