use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};
use tempfile::TempDir;

use super::task::{FunctionRegistry, TaskSpec};
use super::trace::{EventKind, SchedulerTrace, TraceEvent};
use crate::cluster::{ClusterConfig, PlannedFailure};
use crate::error::Error;
use crate::ids::{NodeId, ObjectId, TaskId};
use crate::store::{IoMetrics, NodeStore};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ObjState {
    /// Not sealed yet (first run or being reconstructed).
    Pending,
    /// Sealed at least once; available iff some live node holds a copy.
    Sealed,
    Failed(Error),
    Cancelled,
}

#[derive(Debug)]
pub(crate) struct ObjectEntry {
    pub state: ObjState,
    pub size: Option<u64>,
    pub user_refs: u32,
    /// Unfinished tasks that take this object as an argument.
    pub task_pins: u32,
    pub checksum: Option<u64>,
    pub waiters: Vec<TaskId>,
}

impl ObjectEntry {
    pub fn pending() -> Self {
        ObjectEntry {
            state: ObjState::Pending,
            size: None,
            user_refs: 1,
            task_pins: 0,
            checksum: None,
            waiters: Vec::new(),
        }
    }

    pub fn live(&self) -> bool {
        self.user_refs + self.task_pins > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Waiting,
    Queued(NodeId),
    Running { node: NodeId, slot: usize },
    Finished,
    Failed,
    Cancelled,
}

impl Phase {
    pub fn in_progress(self) -> bool {
        matches!(
            self,
            Phase::Waiting | Phase::Queued(_) | Phase::Running { .. }
        )
    }
}

/// Lineage record plus scheduling state of one task.
#[derive(Debug)]
pub(crate) struct TaskRecord {
    pub spec: TaskSpec,
    pub returns: Vec<ObjectId>,
    /// Distinct object arguments.
    pub deps: Vec<ObjectId>,
    pub phase: Phase,
    pub attempt: u32,
    pub retries: u32,
    pub missing: usize,
    pub stop: Arc<AtomicBool>,
    /// Whether `deps` currently carry this task's pin.
    pub pinning: bool,
}

#[derive(Debug)]
pub(crate) struct RunningSlot {
    pub task: TaskId,
    pub attempt: u32,
    pub pinned: Vec<ObjectId>,
    pub executing: bool,
}

pub(crate) enum IoJob {
    Spill {
        victims: Vec<(ObjectId, Bytes)>,
        write_through: bool,
    },
    Prefetch(TaskId),
}

pub(crate) struct NodeState {
    pub alive: bool,
    pub epoch: u64,
    pub queue: VecDeque<TaskId>,
    pub slots: Vec<Option<RunningSlot>>,
    pub slot_gen: Vec<u64>,
    pub store: NodeStore,
    pub io_jobs: VecDeque<IoJob>,
    /// Cumulative across restarts of this node id.
    pub metrics: IoMetrics,
}

impl NodeState {
    pub fn load(&self) -> usize {
        self.queue.len() + self.slots.iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Counters {
    pub tasks_submitted: u64,
    pub tasks_finished: u64,
    pub task_retries: u64,
    pub reconstructions: u64,
    pub replay_checks: u64,
    pub replay_mismatches: u64,
}

pub(crate) struct State {
    pub nodes: Vec<NodeState>,
    pub objects: HashMap<ObjectId, ObjectEntry>,
    pub tasks: HashMap<TaskId, TaskRecord>,
    pub next_task: u64,
    pub next_ticket: u64,
    pub trace: SchedulerTrace,
    pub counters: Counters,
    pub plan: Vec<(PlannedFailure, bool)>,
    pub shutdown: bool,
    pub network_by_function: BTreeMap<String, u64>,
    pub max_object_size: u64,
}

impl State {
    pub fn fresh_task_id(&mut self) -> TaskId {
        self.next_task += 1;
        TaskId(self.next_task)
    }

    /// Is there a readable copy on some live node?
    pub fn available(&self, id: ObjectId) -> bool {
        matches!(self.objects.get(&id), Some(e) if e.state == ObjState::Sealed)
            && self.nodes.iter().any(|n| n.alive && n.store.has_any(id))
    }

    pub fn label_of(&self, task: TaskId) -> Option<String> {
        self.tasks.get(&task).map(|t| t.spec.label().to_string())
    }
}

pub(crate) struct Shared {
    pub state: Mutex<State>,
    /// Signalled on any object, task or allocation state change.
    pub changed: Condvar,
    /// Per node: queued task or I/O job available.
    pub work: Vec<Condvar>,
    pub registry: FunctionRegistry,
    pub config: ClusterConfig,
    pub started: Instant,
    pub spill_root: PathBuf,
    pub _tempdir: Option<TempDir>,
    pub threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    pub fn now_us(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    pub fn node_dir(&self, node: NodeId, epoch: u64) -> PathBuf {
        self.spill_root.join(format!("node-{node}-e{epoch}"))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn event(
        &self,
        st: &mut State,
        kind: EventKind,
        subject: String,
        node: Option<NodeId>,
        label: Option<String>,
        attempt: Option<u32>,
        detail: Option<&str>,
    ) {
        let ts_us = self.now_us();
        st.trace.events.push(TraceEvent {
            ts_us,
            kind,
            subject,
            node,
            label,
            attempt,
            detail: detail.map(str::to_string),
        });
    }

    pub fn task_event(
        &self,
        st: &mut State,
        kind: EventKind,
        task: TaskId,
        node: Option<NodeId>,
        detail: Option<&str>,
    ) {
        let (label, attempt) = match st.tasks.get(&task) {
            Some(t) => (Some(t.spec.label().to_string()), Some(t.attempt)),
            None => (None, None),
        };
        self.event(st, kind, task.to_string(), node, label, attempt, detail);
    }

    pub fn object_event(
        &self,
        st: &mut State,
        kind: EventKind,
        obj: ObjectId,
        node: NodeId,
        detail: Option<&str>,
    ) {
        let label = st.label_of(obj.task());
        self.event(st, kind, obj.to_hex(), Some(node), label, None, detail);
    }
}
