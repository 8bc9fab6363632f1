use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskSubmitted,
    TaskStarted,
    TaskFinished,
    TaskCancelled,
    TaskRetried,
    ObjectSealed,
    ObjectSpilled,
    ObjectRestored,
    ObjectEvicted,
    NodeFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Microseconds since the runtime started.
    pub ts_us: u64,
    pub kind: EventKind,
    /// Task id (`t12`), object id (hex) or node id, depending on `kind`.
    pub subject: String,
    pub node: Option<NodeId>,
    /// Task label for task events, producing task label for object events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Append-only event log.
#[derive(Debug, Clone, Default)]
pub struct SchedulerTrace {
    pub events: Vec<TraceEvent>,
}

impl SchedulerTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl(path: &Path) -> std::io::Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Ok(SchedulerTrace { events })
    }

    /// Checks that every start follows a submit and every finish follows a
    /// start of the same attempt. Returns the first offending event.
    pub fn check_ordering(&self) -> Result<(), TraceEvent> {
        use std::collections::HashSet;
        let mut submitted = HashSet::new();
        let mut started = HashSet::new();
        for e in &self.events {
            match e.kind {
                EventKind::TaskSubmitted => {
                    submitted.insert(e.subject.clone());
                }
                EventKind::TaskStarted => {
                    if !submitted.contains(&e.subject) {
                        return Err(e.clone());
                    }
                    started.insert((e.subject.clone(), e.attempt));
                }
                EventKind::TaskFinished if !started.contains(&(e.subject.clone(), e.attempt)) => {
                    return Err(e.clone());
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: u64, kind: EventKind, subject: &str, attempt: Option<u32>) -> TraceEvent {
        TraceEvent {
            ts_us: ts,
            kind,
            subject: subject.into(),
            node: Some(0),
            label: None,
            attempt,
            detail: None,
        }
    }

    #[test]
    fn ordering_check_flags_start_without_submit() {
        let t = SchedulerTrace {
            events: vec![ev(0, EventKind::TaskStarted, "t1", Some(0))],
        };
        assert!(t.check_ordering().is_err());
        let t = SchedulerTrace {
            events: vec![
                ev(0, EventKind::TaskSubmitted, "t1", Some(0)),
                ev(1, EventKind::TaskStarted, "t1", Some(0)),
                ev(2, EventKind::TaskFinished, "t1", Some(0)),
            ],
        };
        assert!(t.check_ordering().is_ok());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.jsonl");
        let t = SchedulerTrace {
            events: vec![
                ev(5, EventKind::NodeFailed, "2", None),
                ev(6, EventKind::ObjectSealed, "ab", None),
            ],
        };
        t.write_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"ts_us\":5,\"kind\":\"node_failed\""));
        assert_eq!(SchedulerTrace::read_jsonl(&p).unwrap().events, t.events);
    }
}
