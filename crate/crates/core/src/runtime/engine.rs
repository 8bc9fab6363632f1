//! Scheduler state transitions. Every function here runs with the runtime
//! lock held; the ones taking the guard may wait on a condition variable
//! and therefore release it temporarily.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::MutexGuard;
use tracing::debug;

use super::state::{IoJob, ObjState, ObjectEntry, Phase, Shared, State, TaskRecord};
use super::task::{Arg, ObjectRef, TaskSpec};
use super::trace::EventKind;
use super::worker;
use crate::checksum::fnv1a64;
use crate::cluster::FailureAction;
use crate::error::{Error, Result};
use crate::ids::{NodeId, ObjectId, TaskId};
use crate::store::spill::{self, SpillAddress};
use crate::store::{AllocKind, NodeStore};

pub(crate) type Guard<'a> = MutexGuard<'a, State>;

pub(crate) fn submit(sh: &Arc<Shared>, st: &mut State, spec: TaskSpec) -> Result<Vec<ObjectRef>> {
    if !sh.registry.contains(&spec.function_id) {
        return Err(Error::UnknownFunction(spec.function_id));
    }
    if spec.num_returns == 0 {
        return Err(Error::InvalidArgument(
            "num_returns must be positive".into(),
        ));
    }
    let mut deps = Vec::new();
    for a in &spec.args {
        match a {
            Arg::Ref(r) => {
                let e = st
                    .objects
                    .get(&r.object_id)
                    .ok_or(Error::DeadReference(r.object_id))?;
                if e.user_refs == 0 {
                    return Err(Error::DeadReference(r.object_id));
                }
                if !deps.contains(&r.object_id) {
                    deps.push(r.object_id);
                }
            }
            Arg::Inline(b) => {
                if b.len() > sh.config.inline_limit {
                    return Err(Error::InlineTooLarge {
                        size: b.len(),
                        limit: sh.config.inline_limit,
                    });
                }
            }
        }
    }
    let tid = st.fresh_task_id();
    let returns: Vec<ObjectId> = (0..spec.num_returns as u64)
        .map(|i| ObjectId::new(tid, i))
        .collect();
    for &o in &returns {
        st.objects.insert(o, ObjectEntry::pending());
    }
    for &d in &deps {
        st.objects.get_mut(&d).expect("checked above").task_pins += 1;
    }
    st.tasks.insert(
        tid,
        TaskRecord {
            spec,
            returns: returns.clone(),
            deps,
            phase: Phase::Waiting,
            attempt: 0,
            retries: 0,
            missing: 0,
            stop: Arc::new(AtomicBool::new(false)),
            pinning: true,
        },
    );
    st.counters.tasks_submitted += 1;
    sh.task_event(st, EventKind::TaskSubmitted, tid, None, None);
    resolve(sh, st, tid);
    Ok(returns.into_iter().map(ObjectRef::new).collect())
}

/// Registers the task as a waiter on every unavailable argument (asking
/// for reconstruction of lost ones) and queues it once nothing is missing.
pub(crate) fn resolve(sh: &Arc<Shared>, st: &mut State, tid: TaskId) {
    let deps = match st.tasks.get(&tid) {
        Some(t) if t.phase == Phase::Waiting => t.deps.clone(),
        _ => return,
    };
    let mut missing = 0;
    for d in deps {
        let state = st.objects.get(&d).map(|e| e.state.clone());
        match state {
            Some(ObjState::Sealed) if st.available(d) => {}
            Some(ObjState::Sealed) => {
                if let Err(e) = reconstruct(sh, st, d) {
                    fail_task(sh, st, tid, e);
                    return;
                }
                if st.available(d) {
                    continue;
                }
                match st.objects.get(&d).map(|e| e.state.clone()) {
                    Some(ObjState::Failed(e)) => {
                        fail_task(sh, st, tid, e);
                        return;
                    }
                    _ => {
                        st.objects.get_mut(&d).unwrap().waiters.push(tid);
                        missing += 1;
                    }
                }
            }
            Some(ObjState::Pending) => {
                st.objects.get_mut(&d).unwrap().waiters.push(tid);
                missing += 1;
            }
            Some(ObjState::Failed(e)) => {
                fail_task(sh, st, tid, e);
                return;
            }
            Some(ObjState::Cancelled) => {
                fail_task(sh, st, tid, Error::Cancelled(d));
                return;
            }
            None => {
                fail_task(sh, st, tid, Error::DeadReference(d));
                return;
            }
        }
    }
    let t = st.tasks.get_mut(&tid).unwrap();
    t.missing = missing;
    if missing == 0 {
        enqueue(sh, st, tid);
    }
}

fn choose_node(st: &State, spec: &TaskSpec, deps: &[ObjectId]) -> Option<NodeId> {
    if let Some(n) = spec.placement {
        if st.nodes.get(n).is_some_and(|n| n.alive) {
            return Some(n);
        }
    }
    // Least loaded live node; ties go to the node already holding more
    // argument bytes, then to the lowest id.
    st.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.alive)
        .map(|(i, n)| {
            let local: u64 = deps
                .iter()
                .filter_map(|d| n.store.copies.get(d).map(|c| c.size))
                .sum();
            (n.load(), std::cmp::Reverse(local), i)
        })
        .min()
        .map(|(_, _, i)| i)
}

pub(crate) fn enqueue(sh: &Arc<Shared>, st: &mut State, tid: TaskId) {
    let t = &st.tasks[&tid];
    let Some(node) = choose_node(st, &t.spec, &t.deps) else {
        // Every node is down; wait for a restart.
        debug!(task = %tid, "no live node, task parked");
        return;
    };
    let t = st.tasks.get_mut(&tid).unwrap();
    t.phase = Phase::Queued(node);
    let n = &mut st.nodes[node];
    n.queue.push_back(tid);
    if sh.config.store.prefetch_enabled {
        n.io_jobs.push_back(IoJob::Prefetch(tid));
    }
    sh.work[node].notify_all();
}

/// Re-parks every task that was parked because no node was alive.
pub(crate) fn requeue_parked(sh: &Arc<Shared>, st: &mut State) {
    let parked: Vec<TaskId> = st
        .tasks
        .iter()
        .filter(|(_, t)| t.phase == Phase::Waiting && t.missing == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut parked = parked;
    parked.sort();
    for tid in parked {
        resolve(sh, st, tid);
    }
}

/// Makes a lost object available again by re-running its producer,
/// recursively re-running producers of lost inputs. No-op when the object
/// is available or already being produced.
pub(crate) fn reconstruct(sh: &Arc<Shared>, st: &mut State, oid: ObjectId) -> Result<()> {
    let Some(entry) = st.objects.get(&oid) else {
        return Err(Error::DeadReference(oid));
    };
    match &entry.state {
        ObjState::Sealed => {}
        ObjState::Pending => return Ok(()),
        ObjState::Failed(e) => return Err(e.clone()),
        ObjState::Cancelled => return Err(Error::Cancelled(oid)),
    }
    if st.available(oid) {
        return Ok(());
    }
    let producer = oid.task();
    let Some(task) = st.tasks.get(&producer) else {
        return Err(Error::NonReconstructibleRoot(oid));
    };
    if !task.spec.deterministic {
        return Err(Error::ReconstructionFailed(oid));
    }
    let phase = task.phase;
    if phase.in_progress() {
        // The producer is already running again; just wait for it.
        st.objects.get_mut(&oid).unwrap().state = ObjState::Pending;
        return Ok(());
    }
    if phase != Phase::Finished {
        return Err(Error::ReconstructionFailed(oid));
    }
    if task.retries >= sh.config.max_retries {
        let returns = task.returns.clone();
        for r in returns {
            if !st.available(r) {
                set_failed(sh, st, r, Error::ReconstructionFailed(r));
            }
        }
        return Err(Error::ReconstructionFailed(oid));
    }
    let returns = task.returns.clone();
    for r in returns {
        if !st.available(r) {
            if let Some(e) = st.objects.get_mut(&r) {
                if e.state == ObjState::Sealed {
                    e.state = ObjState::Pending;
                }
            }
        }
    }
    let t = st.tasks.get_mut(&producer).unwrap();
    t.retries += 1;
    t.attempt += 1;
    t.phase = Phase::Waiting;
    t.stop = Arc::new(AtomicBool::new(false));
    let deps = t.deps.clone();
    if !t.pinning {
        t.pinning = true;
        for d in &deps {
            if let Some(e) = st.objects.get_mut(d) {
                e.task_pins += 1;
            }
        }
    }
    st.counters.reconstructions += 1;
    st.counters.task_retries += 1;
    debug!(object = %oid, task = %producer, "reconstructing");
    sh.task_event(
        st,
        EventKind::TaskRetried,
        producer,
        None,
        Some("reconstruct"),
    );
    resolve(sh, st, producer);
    Ok(())
}

fn set_failed(sh: &Arc<Shared>, st: &mut State, oid: ObjectId, err: Error) {
    let waiters = match st.objects.get_mut(&oid) {
        Some(e) => {
            e.state = ObjState::Failed(err.clone());
            std::mem::take(&mut e.waiters)
        }
        None => return,
    };
    for w in waiters {
        fail_task(sh, st, w, err.clone());
    }
}

pub(crate) fn fail_task(sh: &Arc<Shared>, st: &mut State, tid: TaskId, err: Error) {
    let Some(t) = st.tasks.get_mut(&tid) else {
        return;
    };
    if !t.phase.in_progress() {
        return;
    }
    t.phase = Phase::Failed;
    t.stop.store(true, Ordering::Relaxed);
    let returns = t.returns.clone();
    debug!(task = %tid, error = %err, "task failed");
    release_task_pins(sh, st, tid);
    for r in returns {
        if !st.available(r) {
            set_failed(sh, st, r, err.clone());
        }
    }
    sh.changed.notify_all();
}

pub(crate) fn release_task_pins(sh: &Arc<Shared>, st: &mut State, tid: TaskId) {
    let deps = match st.tasks.get_mut(&tid) {
        Some(t) if t.pinning => {
            t.pinning = false;
            t.deps.clone()
        }
        _ => return,
    };
    for d in deps {
        if let Some(e) = st.objects.get_mut(&d) {
            e.task_pins = e.task_pins.saturating_sub(1);
        }
        maybe_free(sh, st, d);
    }
}

/// Releases every copy of an object nobody references any more.
pub(crate) fn maybe_free(sh: &Arc<Shared>, st: &mut State, oid: ObjectId) {
    match st.objects.get(&oid) {
        Some(e) if !e.live() => {}
        _ => return,
    }
    let mut released = false;
    for node in 0..st.nodes.len() {
        if st.nodes[node].store.has_any(oid) {
            st.nodes[node].store.remove(oid);
            sh.object_event(st, EventKind::ObjectEvicted, oid, node, Some("freed"));
            released = true;
        }
    }
    if released {
        sh.changed.notify_all();
    }
}

/// Wakes tasks waiting on a freshly sealed object.
pub(crate) fn notify_sealed(sh: &Arc<Shared>, st: &mut State, oid: ObjectId) {
    let waiters = match st.objects.get_mut(&oid) {
        Some(e) => std::mem::take(&mut e.waiters),
        None => return,
    };
    for w in waiters {
        let ready = match st.tasks.get_mut(&w) {
            Some(t) if t.phase == Phase::Waiting && t.missing > 0 => {
                t.missing -= 1;
                t.missing == 0
            }
            _ => false,
        };
        if ready {
            enqueue(sh, st, w);
        }
    }
}

pub(crate) enum AllocOutcome {
    Granted,
    FallbackDisk,
    Stale,
}

fn others_executing(st: &State, node: NodeId, me: Option<usize>) -> bool {
    st.nodes[node]
        .slots
        .iter()
        .enumerate()
        .any(|(i, s)| Some(i) != me && s.as_ref().is_some_and(|s| s.executing))
}

/// Reserves `size` bytes of node memory, queueing behind earlier requests
/// and asking the I/O lane to spill when memory is short.
pub(crate) fn allocate(
    sh: &Arc<Shared>,
    g: &mut Guard<'_>,
    node: NodeId,
    epoch: u64,
    size: u64,
    kind: AllocKind,
    slot: Option<usize>,
) -> AllocOutcome {
    let st: &mut State = g;
    if kind == AllocKind::TaskReturn && size > st.nodes[node].store.limit {
        return AllocOutcome::FallbackDisk;
    }
    st.next_ticket += 1;
    let ticket = st.next_ticket;
    {
        let n = &mut st.nodes[node];
        let q = &mut n.store.alloc_queue;
        match kind {
            AllocKind::TaskReturn => {
                let pos = q
                    .iter()
                    .position(|&(_, k)| k == AllocKind::ArgFetch)
                    .unwrap_or(q.len());
                q.insert(pos, (ticket, kind));
            }
            AllocKind::ArgFetch => q.push_back((ticket, kind)),
        }
        let depth = q.len() as u64;
        n.metrics.allocation_queue_peak = n.metrics.allocation_queue_peak.max(depth);
    }
    loop {
        let st: &mut State = g;
        let fuse = sh.config.store.fuse_threshold;
        let n = &mut st.nodes[node];
        if !n.alive || n.epoch != epoch || st.shutdown {
            n.store.alloc_queue.retain(|&(t, _)| t != ticket);
            sh.changed.notify_all();
            return AllocOutcome::Stale;
        }
        if n.store.alloc_queue.front().map(|&(t, _)| t) == Some(ticket) {
            let store = &mut n.store;
            if store.used + size <= store.limit {
                store.alloc_queue.pop_front();
                store.reserve(size);
                sh.changed.notify_all();
                return AllocOutcome::Granted;
            }
            let short = store.used + size - store.limit;
            let droppable = droppable_secondaries(st, node);
            let evicted = st.nodes[node].store.evict_clean(short, &droppable);
            if !evicted.is_empty() {
                for id in evicted {
                    sh.object_event(st, EventKind::ObjectEvicted, id, node, Some("clean"));
                }
                continue;
            }
            let others = others_executing(st, node, slot);
            let n = &mut st.nodes[node];
            if n.store.spills_in_flight == 0 {
                let victims = n.store.take_dirty_victims(short.max(fuse));
                if !victims.is_empty() {
                    n.store.spills_in_flight += 1;
                    n.io_jobs.push_back(IoJob::Spill {
                        victims,
                        write_through: false,
                    });
                    sh.work[node].notify_all();
                } else {
                    match kind {
                        AllocKind::TaskReturn => {
                            n.store.alloc_queue.pop_front();
                            sh.changed.notify_all();
                            return AllocOutcome::FallbackDisk;
                        }
                        AllocKind::ArgFetch if !others => {
                            // Nothing else can release memory: admit this one
                            // allocation above the limit so the task can run.
                            n.store.alloc_queue.pop_front();
                            n.store.reserve(size);
                            sh.changed.notify_all();
                            return AllocOutcome::Granted;
                        }
                        AllocKind::ArgFetch => {}
                    }
                }
            }
        }
        sh.changed.wait(g);
    }
}

/// Applies the outcome of a finished spill write.
pub(crate) fn finish_spill(
    sh: &Arc<Shared>,
    st: &mut State,
    node: NodeId,
    files: &[spill::SpillFile],
    victims: &[ObjectId],
    write_through: bool,
) {
    let n = &mut st.nodes[node];
    let mut spilled = Vec::new();
    for f in files {
        n.metrics.bytes_spilled += f.total_bytes;
        n.metrics.spill_files_created += 1;
        let path = Arc::new(f.path.clone());
        for e in &f.entries {
            if let Some(c) = n.store.copies.get_mut(&e.object_id) {
                c.spilling = false;
                c.spill = Some(SpillAddress {
                    file_id: f.file_id,
                    path: path.clone(),
                    offset: e.offset,
                    length: e.length,
                    checksum: e.checksum,
                });
                let drop_mem = !write_through && c.pins == 0;
                if drop_mem {
                    n.store.drop_mem(e.object_id);
                }
                spilled.push(e.object_id);
            }
        }
    }
    // Victims whose write failed become candidates again.
    for v in victims {
        if let Some(c) = n.store.copies.get_mut(v) {
            c.spilling = false;
        }
    }
    for id in spilled {
        sh.object_event(
            st,
            EventKind::ObjectSpilled,
            id,
            node,
            write_through.then_some("write_through"),
        );
    }
    sh.changed.notify_all();
}

/// Writes victims as fused files (or one file per object when fusing is off).
pub(crate) fn write_victims(
    dir: &std::path::Path,
    first_file_id: u64,
    victims: &[(ObjectId, bytes::Bytes)],
    fuse_threshold: u64,
) -> Result<Vec<spill::SpillFile>> {
    let sizes: Vec<u64> = victims.iter().map(|(_, b)| b.len() as u64).collect();
    let groups = spill::fuse_groups(&sizes, fuse_threshold);
    let mut out = Vec::with_capacity(groups.len());
    for (i, g) in groups.into_iter().enumerate() {
        out.push(spill::write_spill_file(
            dir,
            first_file_id + i as u64,
            &victims[g],
        )?);
    }
    Ok(out)
}

pub(crate) fn file_ids_needed(victims: &[(ObjectId, bytes::Bytes)], fuse_threshold: u64) -> u64 {
    let sizes: Vec<u64> = victims.iter().map(|(_, b)| b.len() as u64).collect();
    spill::fuse_groups(&sizes, fuse_threshold).len() as u64
}

pub(crate) fn reserve_file_ids(store: &mut NodeStore, count: u64) -> u64 {
    let first = store.next_file;
    store.next_file += count;
    first
}

/// Records a sealed value, verifying replays against the first checksum.
pub(crate) fn record_seal(
    sh: &Arc<Shared>,
    st: &mut State,
    oid: ObjectId,
    bytes: &[u8],
    node: NodeId,
) {
    let size = bytes.len() as u64;
    let sum = sh.config.verify_replays.then(|| fnv1a64(bytes));
    let mut mismatch = false;
    let mut checked = false;
    if let Some(e) = st.objects.get_mut(&oid) {
        e.state = ObjState::Sealed;
        e.size = Some(size);
        if let Some(sum) = sum {
            match e.checksum {
                Some(prev) => {
                    checked = true;
                    mismatch = prev != sum;
                }
                None => e.checksum = Some(sum),
            }
        }
    }
    if checked {
        st.counters.replay_checks += 1;
    }
    if mismatch {
        st.counters.replay_mismatches += 1;
        tracing::warn!(object = %oid, "replayed task produced different bytes");
    }
    st.max_object_size = st.max_object_size.max(size);
    st.nodes[node].metrics.objects_created += 1;
    sh.object_event(st, EventKind::ObjectSealed, oid, node, None);
}

/// Pulls a running attempt off its slot and retries the task.
pub(crate) fn abort_running(
    sh: &Arc<Shared>,
    st: &mut State,
    node: NodeId,
    slot: usize,
    detail: &str,
) {
    let Some(run) = st.nodes[node].slots[slot].take() else {
        return;
    };
    for p in &run.pinned {
        st.nodes[node].store.unpin(*p);
    }
    let matches = st
        .tasks
        .get(&run.task)
        .is_some_and(|t| t.attempt == run.attempt && t.phase == Phase::Running { node, slot });
    if matches {
        retry_task(sh, st, run.task, detail);
    }
}

/// Starts a fresh attempt of a task whose attempt died with an executor.
pub(crate) fn retry_task(sh: &Arc<Shared>, st: &mut State, tid: TaskId, detail: &str) {
    let t = st.tasks.get_mut(&tid).unwrap();
    t.stop.store(true, Ordering::Relaxed);
    if t.retries >= sh.config.max_retries {
        let first = t.returns[0];
        fail_task(sh, st, tid, Error::ReconstructionFailed(first));
        return;
    }
    t.retries += 1;
    t.attempt += 1;
    t.stop = Arc::new(AtomicBool::new(false));
    t.phase = Phase::Waiting;
    st.counters.task_retries += 1;
    sh.task_event(st, EventKind::TaskRetried, tid, None, Some(detail));
    resolve(sh, st, tid);
}

pub(crate) fn kill_node(sh: &Arc<Shared>, st: &mut State, node: NodeId) {
    if !st.nodes[node].alive {
        return;
    }
    let dir = st.nodes[node].store.dir.clone();
    {
        let n = &mut st.nodes[node];
        n.alive = false;
        n.epoch += 1;
        n.io_jobs.clear();
        let limit = n.store.limit;
        let next_dir = sh.node_dir(node, n.epoch);
        n.store = NodeStore::new(limit, next_dir);
    }
    // Machine loss: its spill files go with it.
    let _ = std::fs::remove_dir_all(&dir);
    sh.event(
        st,
        EventKind::NodeFailed,
        node.to_string(),
        Some(node),
        None,
        None,
        None,
    );
    tracing::info!(node, "node killed");

    let running: Vec<usize> = (0..st.nodes[node].slots.len())
        .filter(|&s| st.nodes[node].slots[s].is_some())
        .collect();
    for s in running {
        abort_running(sh, st, node, s, "node_failed");
    }
    let queued: Vec<TaskId> = st.nodes[node].queue.drain(..).collect();
    for tid in queued {
        if let Some(t) = st.tasks.get_mut(&tid) {
            if t.phase == Phase::Queued(node) {
                t.phase = Phase::Waiting;
                resolve(sh, st, tid);
            }
        }
    }
    sh.changed.notify_all();
    for cv in &sh.work {
        cv.notify_all();
    }
}

pub(crate) fn kill_executor(sh: &Arc<Shared>, st: &mut State, node: NodeId, slot: usize) {
    if !st.nodes[node].alive || slot >= st.nodes[node].slots.len() {
        return;
    }
    abort_running(sh, st, node, slot, "executor_failed");
    st.nodes[node].slot_gen[slot] += 1;
    let gen = st.nodes[node].slot_gen[slot];
    let epoch = st.nodes[node].epoch;
    worker::spawn_executor(sh, node, slot, gen, epoch);
    sh.work[node].notify_all();
}

pub(crate) fn restart_node(sh: &Arc<Shared>, st: &mut State, node: NodeId) {
    if st.nodes[node].alive {
        kill_node(sh, st, node);
    }
    let n = &mut st.nodes[node];
    n.alive = true;
    n.epoch += 1;
    let limit = n.store.limit;
    n.store = NodeStore::new(limit, sh.node_dir(node, n.epoch));
    for g in n.slot_gen.iter_mut() {
        *g += 1;
    }
    let epoch = n.epoch;
    let gens = n.slot_gen.clone();
    worker::spawn_node(sh, node, epoch, &gens);
    tracing::info!(node, "node restarted");
    requeue_parked(sh, st);
}

pub(crate) fn apply_failure(sh: &Arc<Shared>, st: &mut State, action: FailureAction) {
    match action {
        FailureAction::KillNode(n) if n < st.nodes.len() => kill_node(sh, st, n),
        FailureAction::KillExecutor { node, slot } if node < st.nodes.len() => {
            kill_executor(sh, st, node, slot)
        }
        FailureAction::RestartNode(n) if n < st.nodes.len() => restart_node(sh, st, n),
        _ => tracing::warn!(?action, "failure targets an unknown node"),
    }
}

pub(crate) fn fire_task_count_triggers(sh: &Arc<Shared>, st: &mut State) {
    let finished = st.counters.tasks_finished;
    let due: Vec<usize> = st
        .plan
        .iter()
        .enumerate()
        .filter(|(_, (p, fired))| {
            !fired && matches!(p.trigger, crate::cluster::Trigger::AfterKTasks(k) if finished >= k)
        })
        .map(|(i, _)| i)
        .collect();
    for i in due {
        st.plan[i].1 = true;
        let action = st.plan[i].0.action;
        apply_failure(sh, st, action);
    }
}

/// Idle secondary copies on `node` whose object still has a copy elsewhere.
pub(crate) fn droppable_secondaries(st: &State, node: NodeId) -> HashSet<ObjectId> {
    st.nodes[node]
        .store
        .idle_secondaries()
        .filter(|id| {
            st.nodes
                .iter()
                .enumerate()
                .any(|(i, n)| i != node && n.alive && n.store.has_any(*id))
        })
        .collect()
}
