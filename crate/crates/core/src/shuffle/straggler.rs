use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::runtime::{ObjectRef, Runtime, TaskSpec, TaskStatus};

/// Duplicate a task once it has been running for `delay_ms`, up to
/// `max_dups` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Speculation {
    pub delay_ms: u64,
    pub max_dups: usize,
}

impl Default for Speculation {
    fn default() -> Self {
        Speculation {
            delay_ms: 200,
            max_dups: 1,
        }
    }
}

impl Speculation {
    pub fn delay(&self) -> Duration {
        Duration::from_millis(self.delay_ms)
    }
}

const POLL: Duration = Duration::from_millis(5);

struct Tracked {
    spec: TaskSpec,
    candidates: Vec<Vec<ObjectRef>>,
    running_since: Option<Instant>,
    winner: Option<usize>,
}

/// Submits `spec` and duplicates it if it straggles; the first copy to
/// finish wins and the others are cancelled.
pub fn speculative_submit(
    rt: &Runtime,
    spec: TaskSpec,
    delay: Duration,
    max_dups: usize,
) -> Result<Vec<ObjectRef>> {
    let s = Speculation {
        delay_ms: delay.as_millis() as u64,
        max_dups,
    };
    let (mut out, _) = speculate_all(rt, vec![spec], s)?;
    Ok(out.pop().expect("one task"))
}

/// Runs every spec with speculation and blocks until each has a winner.
/// Returns the winning return refs per spec and the number of duplicates
/// submitted.
pub fn speculate_all(
    rt: &Runtime,
    specs: Vec<TaskSpec>,
    s: Speculation,
) -> Result<(Vec<Vec<ObjectRef>>, usize)> {
    let nodes = rt.num_nodes();
    let mut tracked = Vec::with_capacity(specs.len());
    for spec in specs {
        let refs = rt.submit(spec.clone())?;
        tracked.push(Tracked {
            spec,
            candidates: vec![refs],
            running_since: None,
            winner: None,
        });
    }
    let mut dups = 0;
    loop {
        let mut watch = Vec::new();
        let mut unresolved = 0;
        for t in tracked.iter_mut().filter(|t| t.winner.is_none()) {
            let done: Vec<usize> = (0..t.candidates.len())
                .filter(|&c| rt.is_ready(&t.candidates[c][0]))
                .collect();
            let sealed = done
                .iter()
                .copied()
                .find(|&c| rt.is_sealed(t.candidates[c][0].id()));
            let all_failed = done.len() == t.candidates.len() && t.candidates.len() > s.max_dups;
            if let Some(c) = sealed.or(if all_failed {
                done.first().copied()
            } else {
                None
            }) {
                t.winner = Some(c);
                for (o, refs) in t.candidates.iter().enumerate() {
                    if o != c {
                        rt.cancel(&refs[0]);
                        rt.drop_refs(refs)?;
                    }
                }
                continue;
            }
            let original = &t.candidates[0][0];
            if t.running_since.is_none()
                && rt
                    .lineage(original.creator_task)
                    .is_some_and(|l| l.status != TaskStatus::Pending)
            {
                t.running_since = Some(Instant::now());
            }
            let n = t.candidates.len();
            if n <= s.max_dups
                && t.running_since
                    .is_some_and(|at| at.elapsed() >= s.delay() * n as u32)
            {
                let home = t.spec.placement.unwrap_or(0);
                let dup = t
                    .spec
                    .clone()
                    .named(format!("{}-dup{n}", t.spec.label()))
                    .placement((nodes > 1).then(|| (home + n) % nodes));
                t.candidates.push(rt.submit(dup)?);
                dups += 1;
            }
            unresolved += 1;
            watch.extend(
                t.candidates
                    .iter()
                    .filter(|c| !rt.is_ready(&c[0]))
                    .map(|c| c[0].clone()),
            );
        }
        if unresolved == 0 {
            break;
        }
        if watch.is_empty() {
            std::thread::sleep(POLL);
        } else {
            rt.wait(&watch, 1, Some(POLL))?;
        }
    }
    let winners = tracked
        .into_iter()
        .map(|mut t| {
            let w = t.winner.expect("loop ends when all have winners");
            t.candidates.swap_remove(w)
        })
        .collect();
    Ok((winners, dups))
}
