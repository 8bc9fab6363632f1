//! Distributed-futures engine.
//!
//! `submit` hands back [`ObjectRef`]s immediately; a task becomes runnable
//! once all of its object arguments are sealed, and runs on one of the
//! simulated nodes with its arguments made local to that node. Values are
//! immutable, reference counted, and recoverable through the driver-side
//! lineage table when a node loses them.

pub(crate) mod engine;
pub(crate) mod state;
pub mod task;
pub mod trace;
mod worker;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};
use serde::Serialize;

pub use task::{
    Arg, FunctionRegistry, ObjectRef, RemoteFn, TaskContext, TaskResult, TaskSpec, TaskStatus,
};
pub use trace::{EventKind, SchedulerTrace, TraceEvent};

use crate::cluster::ClusterConfig;
use crate::error::{Error, Result};
use crate::ids::{NodeId, ObjectId, TaskId};
use crate::store::spill::{self, SpillAddress};
use crate::store::{AllocKind, IoMetrics, NodeStore};
use engine::AllocOutcome;
use state::{NodeState, ObjState, ObjectEntry, Phase, Shared, State};

/// Result of [`Runtime::wait`].
#[derive(Debug, Clone)]
pub struct WaitResult {
    pub ready: Vec<ObjectRef>,
    pub pending: Vec<ObjectRef>,
    pub timed_out: bool,
}

/// Snapshot of one lineage table entry.
#[derive(Debug, Clone)]
pub struct LineageRecord {
    pub task_id: TaskId,
    pub produced_objects: Vec<ObjectId>,
    pub spec: TaskSpec,
    pub status: TaskStatus,
    pub attempt: u32,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsSnapshot {
    pub per_node: Vec<IoMetrics>,
    pub total: IoMetrics,
    pub tasks_submitted: u64,
    pub tasks_finished: u64,
    pub task_retries: u64,
    pub reconstructions: u64,
    pub replay_checks: u64,
    pub replay_mismatches: u64,
    /// Cross-node bytes attributed to the function of the consuming task.
    pub network_by_function: BTreeMap<String, u64>,
}

/// Where copies of an object currently live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectLocation {
    pub node: NodeId,
    pub in_memory: bool,
    pub spilled: bool,
}

#[derive(Debug, Clone)]
pub struct RunningTask {
    pub task: TaskId,
    pub label: String,
    pub node: NodeId,
    pub slot: usize,
}

/// Handle to a running simulated cluster. Dropping it shuts the cluster down.
pub struct Runtime {
    sh: Arc<Shared>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("nodes", &self.sh.config.nodes)
            .finish()
    }
}

impl Runtime {
    pub(crate) fn start(config: ClusterConfig, registry: FunctionRegistry) -> Result<Self> {
        if config.nodes == 0 || config.slots_per_node == 0 {
            return Err(Error::InvalidArgument(
                "a cluster needs at least one node and one slot".into(),
            ));
        }
        let (spill_root, tempdir) = match &config.store.spill_dir {
            Some(p) => {
                std::fs::create_dir_all(p)?;
                (p.clone(), None)
            }
            None => {
                let t = tempfile::Builder::new()
                    .prefix("shufflekit-spill")
                    .tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let nodes = (0..config.nodes)
            .map(|i| NodeState {
                alive: true,
                epoch: 0,
                queue: VecDeque::new(),
                slots: (0..config.slots_per_node).map(|_| None).collect(),
                slot_gen: vec![0; config.slots_per_node],
                store: NodeStore::new(
                    config.store.memory_limit,
                    spill_root.join(format!("node-{i}-e0")),
                ),
                io_jobs: VecDeque::new(),
                metrics: IoMetrics::default(),
            })
            .collect();
        let plan = config.failures.events.iter().map(|p| (*p, false)).collect();
        let state = State {
            nodes,
            objects: HashMap::new(),
            tasks: HashMap::new(),
            next_task: 0,
            next_ticket: 0,
            trace: SchedulerTrace::default(),
            counters: Default::default(),
            plan,
            shutdown: false,
            network_by_function: BTreeMap::new(),
            max_object_size: 0,
        };
        let has_timed = config
            .failures
            .events
            .iter()
            .any(|p| matches!(p.trigger, crate::cluster::Trigger::AtTimeMs(_)));
        let sh = Arc::new(Shared {
            state: Mutex::new(state),
            changed: Condvar::new(),
            work: (0..config.nodes).map(|_| Condvar::new()).collect(),
            registry,
            started: Instant::now(),
            spill_root,
            _tempdir: tempdir,
            threads: Mutex::new(Vec::new()),
            config,
        });
        for node in 0..sh.config.nodes {
            worker::spawn_node(&sh, node, 0, &vec![0; sh.config.slots_per_node]);
        }
        if has_timed {
            worker::spawn_timer(&sh);
        }
        Ok(Runtime { sh })
    }

    pub(crate) fn shared(&self) -> &Arc<Shared> {
        &self.sh
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.sh.config
    }

    pub fn num_nodes(&self) -> usize {
        self.sh.config.nodes
    }

    pub fn elapsed(&self) -> Duration {
        self.sh.started.elapsed()
    }

    /// Submits a task and returns one handle per return value without blocking.
    pub fn submit(&self, spec: TaskSpec) -> Result<Vec<ObjectRef>> {
        let mut g = self.sh.state.lock();
        engine::submit(&self.sh, &mut g, spec)
    }

    /// Submits a single-return task.
    pub fn submit1(&self, spec: TaskSpec) -> Result<ObjectRef> {
        let spec = spec.returns(1);
        Ok(self.submit(spec)?.pop().expect("one return"))
    }

    /// Stores a driver-provided value on `node`. Such roots have no lineage
    /// and cannot be reconstructed if their node dies.
    pub fn put(&self, value: impl Into<Bytes>, node: NodeId) -> Result<ObjectRef> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::EmptyValue);
        }
        let size = value.len() as u64;
        let limit = self.sh.config.store.memory_limit;
        if size > limit {
            return Err(Error::ObjectTooLarge { size, limit });
        }
        let mut g = self.sh.state.lock();
        if node >= g.nodes.len() {
            return Err(Error::NoSuchNode(node));
        }
        if !g.nodes[node].alive {
            return Err(Error::NodeDead(node));
        }
        let oid = ObjectId::new(g.fresh_task_id(), 0);
        g.objects.insert(oid, ObjectEntry::pending());
        let epoch = g.nodes[node].epoch;
        match engine::allocate(
            &self.sh,
            &mut g,
            node,
            epoch,
            size,
            AllocKind::TaskReturn,
            None,
        ) {
            AllocOutcome::Granted => {
                engine::record_seal(&self.sh, &mut g, oid, &value, node);
                g.nodes[node].store.insert_mem(oid, value);
            }
            AllocOutcome::FallbackDisk => {
                let file_id = engine::reserve_file_ids(&mut g.nodes[node].store, 1);
                let dir = g.nodes[node].store.dir.clone();
                let victims = [(oid, value.clone())];
                let f = parking_lot::MutexGuard::unlocked(&mut g, || {
                    spill::write_spill_file(&dir, file_id, &victims)
                })?;
                let e = &f.entries[0];
                let addr = SpillAddress {
                    file_id,
                    path: Arc::new(f.path.clone()),
                    offset: e.offset,
                    length: e.length,
                    checksum: e.checksum,
                };
                engine::record_seal(&self.sh, &mut g, oid, &value, node);
                g.nodes[node].metrics.bytes_spilled += f.total_bytes;
                g.nodes[node].metrics.spill_files_created += 1;
                g.nodes[node].store.insert_spilled(oid, size, addr);
                self.sh.object_event(
                    &mut g,
                    EventKind::ObjectSpilled,
                    oid,
                    node,
                    Some("fallback"),
                );
            }
            AllocOutcome::Stale => {
                g.objects.remove(&oid);
                return Err(Error::NodeDead(node));
            }
        }
        self.sh.changed.notify_all();
        Ok(ObjectRef::new(oid))
    }

    /// Blocks until the value is available and returns it. Lost values are
    /// reconstructed from lineage first.
    pub fn get(&self, r: &ObjectRef, timeout: Option<Duration>) -> Result<Bytes> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let oid = r.object_id;
        let mut g = self.sh.state.lock();
        loop {
            let entry = g.objects.get(&oid).ok_or(Error::DeadReference(oid))?;
            if entry.user_refs == 0 {
                return Err(Error::DeadReference(oid));
            }
            match entry.state.clone() {
                ObjState::Failed(e) => return Err(e),
                ObjState::Cancelled => return Err(Error::Cancelled(oid)),
                ObjState::Sealed => {
                    if let Some(b) = g
                        .nodes
                        .iter_mut()
                        .filter(|n| n.alive)
                        .find_map(|n| n.store.touch(oid))
                    {
                        return Ok(b);
                    }
                    let disk = g
                        .nodes
                        .iter()
                        .enumerate()
                        .filter(|(_, n)| n.alive)
                        .find_map(|(i, n)| {
                            n.store
                                .copies
                                .get(&oid)
                                .and_then(|c| c.spill.clone())
                                .map(|a| (i, a))
                        });
                    match disk {
                        Some((node, addr)) => {
                            let res = parking_lot::MutexGuard::unlocked(&mut g, || {
                                spill::read_object(oid, &addr)
                            });
                            match res {
                                Ok(b) => {
                                    g.nodes[node].metrics.bytes_restored += b.len() as u64;
                                    return Ok(b);
                                }
                                Err(_) => {
                                    g.nodes[node].store.forget_spill(oid);
                                    continue;
                                }
                            }
                        }
                        None => {
                            engine::reconstruct(&self.sh, &mut g, oid)?;
                            continue;
                        }
                    }
                }
                ObjState::Pending => {}
            }
            match deadline {
                Some(d) => {
                    if self.sh.changed.wait_until(&mut g, d).timed_out() && Instant::now() >= d {
                        return Err(Error::Timeout(timeout.unwrap()));
                    }
                }
                None => self.sh.changed.wait(&mut g),
            }
        }
    }

    /// Blocks until `num_ready` of `refs` completed (sealed, failed or
    /// cancelled) or the timeout expires. Moves no value bytes.
    pub fn wait(
        &self,
        refs: &[ObjectRef],
        num_ready: usize,
        timeout: Option<Duration>,
    ) -> Result<WaitResult> {
        if refs.is_empty() || num_ready == 0 || num_ready > refs.len() {
            return Err(Error::InvalidArgument(format!(
                "num_ready {num_ready} out of range for {} refs",
                refs.len()
            )));
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut g = self.sh.state.lock();
        loop {
            let mut done = vec![false; refs.len()];
            let mut count = 0;
            for (i, r) in refs.iter().enumerate() {
                let oid = r.object_id;
                let entry = g.objects.get(&oid).ok_or(Error::DeadReference(oid))?;
                if entry.user_refs == 0 {
                    return Err(Error::DeadReference(oid));
                }
                let complete = match entry.state {
                    ObjState::Failed(_) | ObjState::Cancelled => true,
                    ObjState::Sealed => {
                        if g.available(oid) {
                            true
                        } else {
                            // Lost: start recovery; failures show up as completion.
                            let _ = engine::reconstruct(&self.sh, &mut g, oid);
                            g.available(oid) || matches!(g.objects[&oid].state, ObjState::Failed(_))
                        }
                    }
                    ObjState::Pending => false,
                };
                if complete && count < num_ready {
                    done[i] = true;
                    count += 1;
                }
            }
            let timed_out = deadline.is_some_and(|d| Instant::now() >= d);
            if count >= num_ready || timed_out {
                let (mut ready, mut pending) = (Vec::new(), Vec::new());
                for (i, r) in refs.iter().enumerate() {
                    let mut r = r.clone();
                    r.size_hint = g.objects.get(&r.object_id).and_then(|e| e.size);
                    if done[i] {
                        ready.push(r);
                    } else {
                        pending.push(r);
                    }
                }
                return Ok(WaitResult {
                    ready,
                    pending,
                    timed_out: count < num_ready,
                });
            }
            match deadline {
                Some(d) => {
                    self.sh.changed.wait_until(&mut g, d);
                }
                None => self.sh.changed.wait(&mut g),
            }
        }
    }

    /// Stops the producing task if it has not finished. Returns false when
    /// there was nothing to cancel.
    pub fn cancel(&self, r: &ObjectRef) -> bool {
        let mut g = self.sh.state.lock();
        let tid = r.object_id.task();
        let (phase, returns) = match g.tasks.get(&tid) {
            Some(t) => (t.phase, t.returns.clone()),
            None => return false,
        };
        if phase == Phase::Cancelled {
            return true;
        }
        if !phase.in_progress() {
            return false;
        }
        {
            let t = g.tasks.get_mut(&tid).unwrap();
            t.phase = Phase::Cancelled;
            t.stop.store(true, std::sync::atomic::Ordering::Relaxed);
        }
        if let Phase::Running { node, slot } = phase {
            if let Some(run) = g.nodes[node].slots[slot].take() {
                for p in &run.pinned {
                    g.nodes[node].store.unpin(*p);
                }
            }
        }
        self.sh
            .task_event(&mut g, EventKind::TaskCancelled, tid, None, None);
        engine::release_task_pins(&self.sh, &mut g, tid);
        for oid in returns {
            if g.available(oid) {
                continue;
            }
            let waiters = match g.objects.get_mut(&oid) {
                Some(e) => {
                    e.state = ObjState::Cancelled;
                    std::mem::take(&mut e.waiters)
                }
                None => continue,
            };
            for w in waiters {
                engine::fail_task(&self.sh, &mut g, w, Error::Cancelled(oid));
            }
        }
        self.sh.changed.notify_all();
        true
    }

    /// Takes out an additional user reference.
    pub fn add_ref(&self, r: &ObjectRef) -> Result<ObjectRef> {
        let mut g = self.sh.state.lock();
        let e = g
            .objects
            .get_mut(&r.object_id)
            .ok_or(Error::DeadReference(r.object_id))?;
        if e.user_refs == 0 {
            return Err(Error::DeadReference(r.object_id));
        }
        e.user_refs += 1;
        Ok(r.clone())
    }

    /// Releases one user reference; the last one makes the object collectible.
    pub fn drop_ref(&self, r: &ObjectRef) -> Result<()> {
        let mut g = self.sh.state.lock();
        let e = g
            .objects
            .get_mut(&r.object_id)
            .ok_or(Error::DoubleDrop(r.object_id))?;
        if e.user_refs == 0 {
            return Err(Error::DoubleDrop(r.object_id));
        }
        e.user_refs -= 1;
        engine::maybe_free(&self.sh, &mut g, r.object_id);
        Ok(())
    }

    pub fn drop_refs<'a>(&self, refs: impl IntoIterator<Item = &'a ObjectRef>) -> Result<()> {
        for r in refs {
            self.drop_ref(r)?;
        }
        Ok(())
    }

    /// Re-executes lineage to recover a lost object; a no-op when it is live.
    pub fn reconstruct(&self, oid: ObjectId) -> Result<()> {
        let mut g = self.sh.state.lock();
        engine::reconstruct(&self.sh, &mut g, oid)
    }

    pub fn object_size(&self, r: &ObjectRef) -> Option<u64> {
        self.sh
            .state
            .lock()
            .objects
            .get(&r.object_id)
            .and_then(|e| e.size)
    }

    /// Size of every ref; blocks until each is sealed.
    pub fn sizes(&self, refs: &[ObjectRef]) -> Result<Vec<u64>> {
        if refs.is_empty() {
            return Ok(Vec::new());
        }
        let w = self.wait(refs, refs.len(), None)?;
        debug_assert!(!w.timed_out);
        Ok(refs
            .iter()
            .map(|r| self.object_size(r).unwrap_or(0))
            .collect())
    }

    pub fn locations(&self, oid: ObjectId) -> Vec<ObjectLocation> {
        let g = self.sh.state.lock();
        g.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.alive)
            .filter_map(|(i, n)| {
                n.store.copies.get(&oid).map(|c| ObjectLocation {
                    node: i,
                    in_memory: c.mem.is_some(),
                    spilled: c.spill.is_some(),
                })
            })
            .collect()
    }

    /// True once the object is sealed, failed or cancelled.
    pub fn is_ready(&self, r: &ObjectRef) -> bool {
        matches!(self.sh.state.lock().objects.get(&r.object_id), Some(e) if e.state != ObjState::Pending)
    }

    pub fn is_sealed(&self, oid: ObjectId) -> bool {
        matches!(self.sh.state.lock().objects.get(&oid), Some(e) if e.state == ObjState::Sealed)
    }

    /// Spills unpinned in-memory objects of `node` (LRU first) until at
    /// least `needed` bytes of memory were released, or everything
    /// evictable was. Returns the bytes freed.
    pub fn spill(&self, node: NodeId, needed: u64) -> Result<u64> {
        let sh = &self.sh;
        let mut g = sh.state.lock();
        if node >= g.nodes.len() {
            return Err(Error::NoSuchNode(node));
        }
        if !g.nodes[node].alive {
            return Err(Error::NodeDead(node));
        }
        let before = g.nodes[node].store.used;
        let droppable = engine::droppable_secondaries(&g, node);
        let evicted = g.nodes[node].store.evict_clean(needed, &droppable);
        for id in evicted {
            sh.object_event(&mut g, EventKind::ObjectEvicted, id, node, Some("clean"));
        }
        let freed_clean = before - g.nodes[node].store.used;
        let remaining = needed.saturating_sub(freed_clean);
        let victims = if remaining > 0 {
            let target = remaining.max(sh.config.store.fuse_threshold);
            g.nodes[node].store.take_dirty_victims(target)
        } else {
            Vec::new()
        };
        if victims.is_empty() {
            if freed_clean == 0 && needed > 0 {
                return Err(Error::NothingToSpill(node));
            }
            return Ok(freed_clean);
        }
        let fuse = sh.config.store.fuse_threshold;
        let epoch = g.nodes[node].epoch;
        let count = engine::file_ids_needed(&victims, fuse);
        let first = engine::reserve_file_ids(&mut g.nodes[node].store, count);
        g.nodes[node].store.spills_in_flight += 1;
        let dir = g.nodes[node].store.dir.clone();
        let res = parking_lot::MutexGuard::unlocked(&mut g, || {
            engine::write_victims(&dir, first, &victims, fuse)
        });
        if g.nodes[node].epoch != epoch {
            return Err(Error::NodeDead(node));
        }
        let ids: Vec<ObjectId> = victims.iter().map(|(id, _)| *id).collect();
        let used_before = g.nodes[node].store.used;
        let out = match res {
            Ok(files) => {
                engine::finish_spill(sh, &mut g, node, &files, &ids, false);
                Ok(freed_clean + used_before.saturating_sub(g.nodes[node].store.used))
            }
            Err(e) => {
                engine::finish_spill(sh, &mut g, node, &[], &ids, false);
                Err(e)
            }
        };
        let st = &mut g.nodes[node].store;
        st.spills_in_flight = st.spills_in_flight.saturating_sub(1);
        sh.changed.notify_all();
        out
    }

    /// Copies a spilled object back into `node`'s memory. A missing or
    /// corrupt spill file drops that copy and, when it was the last one,
    /// falls back to lineage reconstruction.
    pub fn restore(&self, oid: ObjectId, node: NodeId) -> Result<()> {
        self.fetch_into(oid, None, node)
    }

    /// Copies an object from `from` into `to`'s memory, metering the bytes
    /// as network traffic. No-op when `to` already holds it in memory.
    pub fn pull(&self, oid: ObjectId, from: NodeId, to: NodeId) -> Result<()> {
        self.fetch_into(oid, Some(from), to)
    }

    fn fetch_into(&self, oid: ObjectId, from: Option<NodeId>, to: NodeId) -> Result<()> {
        let sh = &self.sh;
        let mut g = sh.state.lock();
        let n = g.nodes.len();
        if to >= n || from.is_some_and(|f| f >= n) {
            return Err(Error::NoSuchNode(to));
        }
        loop {
            if !g.nodes[to].alive {
                return Err(Error::NodeDead(to));
            }
            if g.nodes[to].store.has_mem(oid) {
                return Ok(());
            }
            match g.objects.get(&oid).map(|e| e.state.clone()) {
                Some(ObjState::Sealed) => {}
                Some(ObjState::Pending) => {
                    sh.changed.wait(&mut g);
                    continue;
                }
                Some(ObjState::Failed(e)) => return Err(e),
                Some(ObjState::Cancelled) => return Err(Error::Cancelled(oid)),
                None => return Err(Error::DeadReference(oid)),
            }
            let src_node = from.unwrap_or(to);
            let copy = if g.nodes[src_node].alive {
                g.nodes[src_node].store.copies.get(&oid).cloned()
            } else {
                None
            };
            let Some(copy) = copy else {
                if !g.available(oid) {
                    engine::reconstruct(sh, &mut g, oid)?;
                    continue;
                }
                return Err(Error::SourceLost(oid));
            };
            let size = copy.size;
            let epoch = g.nodes[to].epoch;
            match engine::allocate(sh, &mut g, to, epoch, size, AllocKind::ArgFetch, None) {
                AllocOutcome::Granted => {}
                _ => return Err(Error::NodeDead(to)),
            }
            let lat = sh.config.store.fetch_latency();
            let res = parking_lot::MutexGuard::unlocked(&mut g, || {
                if !lat.is_zero() {
                    std::thread::sleep(lat);
                }
                match (&copy.mem, &copy.spill) {
                    (Some(m), _) if src_node != to => Ok(m.clone()),
                    (_, Some(a)) => spill::read_object(oid, a),
                    (Some(m), None) => Ok(m.clone()),
                    (None, None) => Err(Error::SourceLost(oid)),
                }
            });
            if g.nodes[to].epoch != epoch {
                return Err(Error::NodeDead(to));
            }
            match res {
                Ok(b) => {
                    if src_node == to {
                        g.nodes[to].store.insert_mem(oid, b);
                    } else {
                        g.nodes[to].store.insert_secondary(oid, b);
                    }
                    if src_node == to {
                        g.nodes[to].metrics.bytes_restored += size;
                        sh.object_event(&mut g, EventKind::ObjectRestored, oid, to, None);
                    } else {
                        g.nodes[to].metrics.network_bytes += size;
                        *g.network_by_function.entry("driver".into()).or_default() += size;
                    }
                    sh.changed.notify_all();
                    return Ok(());
                }
                Err(_) => {
                    g.nodes[to].store.release(size);
                    g.nodes[src_node].store.forget_spill(oid);
                    if !g.available(oid) {
                        engine::reconstruct(sh, &mut g, oid)?;
                    }
                }
            }
        }
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let g = self.sh.state.lock();
        let per_node: Vec<IoMetrics> = g.nodes.iter().map(|n| n.metrics).collect();
        MetricsSnapshot {
            total: IoMetrics::sum(&per_node),
            per_node,
            tasks_submitted: g.counters.tasks_submitted,
            tasks_finished: g.counters.tasks_finished,
            task_retries: g.counters.task_retries,
            reconstructions: g.counters.reconstructions,
            replay_checks: g.counters.replay_checks,
            replay_mismatches: g.counters.replay_mismatches,
            network_by_function: g.network_by_function.clone(),
        }
    }

    pub fn trace(&self) -> SchedulerTrace {
        self.sh.state.lock().trace.clone()
    }

    /// Bytes currently held in `node`'s memory.
    pub fn memory_used(&self, node: NodeId) -> u64 {
        self.sh.state.lock().nodes[node].store.used
    }

    pub fn total_memory_used(&self) -> u64 {
        self.sh
            .state
            .lock()
            .nodes
            .iter()
            .map(|n| n.store.used)
            .sum()
    }

    /// Highest memory use seen on `node` since it (re)started.
    pub fn peak_memory_used(&self, node: NodeId) -> u64 {
        self.sh.state.lock().nodes[node].store.peak_used
    }

    pub fn max_object_size(&self) -> u64 {
        self.sh.state.lock().max_object_size
    }

    pub fn lineage(&self, task: TaskId) -> Option<LineageRecord> {
        let g = self.sh.state.lock();
        g.tasks.get(&task).map(|t| record_of(task, t))
    }

    pub fn lineage_records(&self) -> Vec<LineageRecord> {
        let g = self.sh.state.lock();
        let mut out: Vec<_> = g.tasks.iter().map(|(id, t)| record_of(*id, t)).collect();
        out.sort_by_key(|r| r.task_id);
        out
    }

    pub fn running_tasks(&self) -> Vec<RunningTask> {
        let g = self.sh.state.lock();
        let mut out = Vec::new();
        for (node, n) in g.nodes.iter().enumerate() {
            for (slot, s) in n.slots.iter().enumerate() {
                if let Some(s) = s.as_ref().filter(|s| s.executing) {
                    out.push(RunningTask {
                        task: s.task,
                        label: g.label_of(s.task).unwrap_or_default(),
                        node,
                        slot,
                    });
                }
            }
        }
        out
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.sh
            .state
            .lock()
            .nodes
            .get(node)
            .is_some_and(|n| n.alive)
    }

    /// Blocks until no task is waiting, queued or running.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut g = self.sh.state.lock();
        loop {
            let busy = g.tasks.values().any(|t| t.phase.in_progress())
                || g.nodes
                    .iter()
                    .any(|n| n.store.spills_in_flight > 0 || !n.io_jobs.is_empty());
            if !busy {
                return true;
            }
            if self.sh.changed.wait_until(&mut g, deadline).timed_out() {
                return false;
            }
        }
    }
}

fn record_of(id: TaskId, t: &state::TaskRecord) -> LineageRecord {
    let status = match t.phase {
        Phase::Waiting | Phase::Queued(_) => TaskStatus::Pending,
        Phase::Running { .. } => TaskStatus::Running,
        Phase::Finished => TaskStatus::Finished,
        Phase::Failed => TaskStatus::Failed,
        Phase::Cancelled => TaskStatus::Cancelled,
    };
    LineageRecord {
        task_id: id,
        produced_objects: t.returns.clone(),
        spec: t.spec.clone(),
        status,
        attempt: t.attempt,
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        {
            let mut g = self.sh.state.lock();
            g.shutdown = true;
            worker::stop_all(&mut g);
        }
        self.sh.changed.notify_all();
        for cv in &self.sh.work {
            cv.notify_all();
        }
        loop {
            let handles: Vec<_> = std::mem::take(&mut *self.sh.threads.lock());
            if handles.is_empty() {
                break;
            }
            for h in handles {
                let _ = h.join();
            }
        }
    }
}
