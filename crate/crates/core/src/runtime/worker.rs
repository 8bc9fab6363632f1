//! Executor slots, per-node I/O lanes and the failure-plan timer.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use tracing::{debug, warn};

use super::engine::{self, AllocOutcome, Guard};
use super::state::{IoJob, ObjState, Phase, RunningSlot, Shared, State};
use super::task::{Arg, TaskContext, TaskResult};
use super::trace::EventKind;
use crate::error::Error;
use crate::ids::{NodeId, ObjectId, TaskId};
use crate::store::spill::{self, SpillAddress};
use crate::store::AllocKind;

pub(crate) fn spawn_node(sh: &Arc<Shared>, node: NodeId, epoch: u64, gens: &[u64]) {
    for (slot, &gen) in gens.iter().enumerate() {
        spawn_executor(sh, node, slot, gen, epoch);
    }
    let s = sh.clone();
    let h = std::thread::Builder::new()
        .name(format!("io-{node}"))
        .spawn(move || io_lane(&s, node, epoch))
        .expect("spawn io lane");
    sh.threads.lock().push(h);
}

pub(crate) fn spawn_executor(sh: &Arc<Shared>, node: NodeId, slot: usize, gen: u64, epoch: u64) {
    let s = sh.clone();
    let h = std::thread::Builder::new()
        .name(format!("exec-{node}-{slot}"))
        .spawn(move || executor(&s, node, slot, gen, epoch))
        .expect("spawn executor");
    sh.threads.lock().push(h);
}

pub(crate) fn spawn_timer(sh: &Arc<Shared>) {
    let s = sh.clone();
    let h = std::thread::Builder::new()
        .name("failure-timer".into())
        .spawn(move || timer(&s))
        .expect("spawn timer");
    sh.threads.lock().push(h);
}

fn executor_current(st: &State, node: NodeId, slot: usize, gen: u64, epoch: u64) -> bool {
    let n = &st.nodes[node];
    !st.shutdown && n.alive && n.epoch == epoch && n.slot_gen[slot] == gen
}

fn attempt_current(st: &State, tid: TaskId, attempt: u32, node: NodeId, slot: usize) -> bool {
    st.tasks
        .get(&tid)
        .is_some_and(|t| t.attempt == attempt && t.phase == Phase::Running { node, slot })
}

fn executor(sh: &Arc<Shared>, node: NodeId, slot: usize, gen: u64, epoch: u64) {
    let mut g = sh.state.lock();
    loop {
        if !executor_current(&g, node, slot, gen, epoch) {
            return;
        }
        let Some(tid) = g.nodes[node].queue.pop_front() else {
            sh.work[node].wait(&mut g);
            continue;
        };
        match g.tasks.get(&tid) {
            Some(t) if t.phase == Phase::Queued(node) => {}
            _ => continue,
        }
        run_task(sh, &mut g, node, slot, gen, epoch, tid);
    }
}

enum Localize {
    Ready(Bytes),
    Missing,
    Failed(Error),
    Stale,
}

enum Source {
    Mem(Bytes),
    Disk(SpillAddress, NodeId),
}

fn find_source(st: &State, oid: ObjectId, dest: NodeId) -> Option<Source> {
    if let Some(addr) = st.nodes[dest]
        .store
        .copies
        .get(&oid)
        .and_then(|c| c.spill.clone())
    {
        return Some(Source::Disk(addr, dest));
    }
    for (i, n) in st.nodes.iter().enumerate() {
        if i == dest || !n.alive {
            continue;
        }
        if let Some(m) = n.store.copies.get(&oid).and_then(|c| c.mem.clone()) {
            return Some(Source::Mem(m));
        }
    }
    for (i, n) in st.nodes.iter().enumerate() {
        if i == dest || !n.alive {
            continue;
        }
        if let Some(a) = n.store.copies.get(&oid).and_then(|c| c.spill.clone()) {
            return Some(Source::Disk(a, i));
        }
    }
    None
}

/// Copies the object into `dest`'s memory from the chosen source. Called
/// without the lock; sleeps the simulated fetch latency first.
fn read_source(sh: &Shared, oid: ObjectId, src: &Source) -> Result<Bytes, Error> {
    let lat = sh.config.store.fetch_latency();
    if !lat.is_zero() {
        std::thread::sleep(lat);
    }
    match src {
        Source::Mem(b) => Ok(b.clone()),
        Source::Disk(addr, _) => spill::read_object(oid, addr),
    }
}

/// Accounts a completed fetch into `dest`: restore metrics for local disk,
/// network metrics for anything that crossed nodes.
fn install_fetched(st: &mut State, node: NodeId, oid: ObjectId, bytes: Bytes, src: &Source) {
    match src {
        Source::Disk(_, from) if *from == node => st.nodes[node].store.insert_mem(oid, bytes),
        _ => st.nodes[node].store.insert_secondary(oid, bytes),
    }
}

fn account_fetch(
    sh: &Shared,
    st: &mut State,
    oid: ObjectId,
    dest: NodeId,
    src: &Source,
    size: u64,
    consumer: Option<TaskId>,
) {
    match src {
        Source::Disk(_, from) if *from == dest => {
            st.nodes[dest].metrics.bytes_restored += size;
            sh.object_event(st, EventKind::ObjectRestored, oid, dest, None);
        }
        _ => {
            st.nodes[dest].metrics.network_bytes += size;
            let f = consumer
                .and_then(|t| st.tasks.get(&t))
                .map(|t| t.spec.function_id.clone())
                .unwrap_or_else(|| "driver".into());
            *st.network_by_function.entry(f).or_default() += size;
        }
    }
}

fn source_failed(sh: &Shared, st: &mut State, oid: ObjectId, src: &Source) {
    if let Source::Disk(_, from) = src {
        warn!(object = %oid, node = from, "spill copy unreadable, dropping it");
        st.nodes[*from].store.forget_spill(oid);
        sh.changed.notify_all();
    }
}

/// Makes `oid` resident and pinned on `node` for the running attempt.
fn localize(
    sh: &Arc<Shared>,
    g: &mut Guard<'_>,
    node: NodeId,
    slot: usize,
    epoch: u64,
    oid: ObjectId,
    consumer: TaskId,
) -> Localize {
    loop {
        let st: &mut State = g;
        if !st.nodes[node].alive || st.nodes[node].epoch != epoch {
            return Localize::Stale;
        }
        match st.objects.get(&oid).map(|e| e.state.clone()) {
            Some(ObjState::Sealed) => {}
            Some(ObjState::Failed(e)) => return Localize::Failed(e),
            Some(ObjState::Cancelled) => return Localize::Failed(Error::Cancelled(oid)),
            _ => return Localize::Missing,
        }
        if let Some(b) = st.nodes[node].store.pin(oid) {
            return Localize::Ready(b);
        }
        if st.nodes[node].store.inflight_fetch.contains(&oid) {
            sh.changed.wait(g);
            continue;
        }
        let Some(src) = find_source(st, oid, node) else {
            return Localize::Missing;
        };
        let size = st.objects[&oid].size.unwrap_or(0);
        st.nodes[node].store.inflight_fetch.insert(oid);
        match engine::allocate(sh, g, node, epoch, size, AllocKind::ArgFetch, Some(slot)) {
            AllocOutcome::Granted => {}
            _ => {
                g.nodes[node].store.inflight_fetch.remove(&oid);
                return Localize::Stale;
            }
        }
        let res = parking_lot::MutexGuard::unlocked(g, || read_source(sh, oid, &src));
        let st: &mut State = g;
        if st.nodes[node].epoch != epoch {
            return Localize::Stale;
        }
        st.nodes[node].store.inflight_fetch.remove(&oid);
        sh.changed.notify_all();
        match res {
            Ok(bytes) => {
                install_fetched(st, node, oid, bytes, &src);
                account_fetch(sh, st, oid, node, &src, size, Some(consumer));
                if let Some(b) = st.nodes[node].store.pin(oid) {
                    return Localize::Ready(b);
                }
            }
            Err(_) => {
                st.nodes[node].store.release(size);
                source_failed(sh, st, oid, &src);
            }
        }
    }
}

fn unpin_all(st: &mut State, node: NodeId, pinned: &[ObjectId]) {
    for p in pinned {
        st.nodes[node].store.unpin(*p);
    }
}

fn run_task(
    sh: &Arc<Shared>,
    g: &mut Guard<'_>,
    node: NodeId,
    slot: usize,
    gen: u64,
    epoch: u64,
    tid: TaskId,
) {
    let (spec, attempt, stop) = {
        let t = g.tasks.get_mut(&tid).unwrap();
        t.phase = Phase::Running { node, slot };
        (t.spec.clone(), t.attempt, t.stop.clone())
    };
    g.nodes[node].slots[slot] = Some(RunningSlot {
        task: tid,
        attempt,
        pinned: Vec::new(),
        executing: false,
    });

    let mut args = Vec::with_capacity(spec.args.len());
    for a in &spec.args {
        match a {
            Arg::Inline(b) => args.push(b.clone()),
            Arg::Ref(r) => {
                let oid = r.object_id;
                let outcome = localize(sh, g, node, slot, epoch, oid, tid);
                if !attempt_current(g, tid, attempt, node, slot) {
                    // Cancelled, or the slot/node was killed meanwhile.
                    if let Localize::Ready(_) = outcome {
                        if g.nodes[node].epoch == epoch {
                            g.nodes[node].store.unpin(oid);
                        }
                    }
                    return;
                }
                match outcome {
                    Localize::Ready(b) => {
                        if let Some(s) = g.nodes[node].slots[slot].as_mut() {
                            s.pinned.push(oid);
                        }
                        args.push(b);
                    }
                    Localize::Stale => return,
                    Localize::Failed(e) => {
                        let run = g.nodes[node].slots[slot].take();
                        if let Some(run) = run {
                            unpin_all(g, node, &run.pinned);
                        }
                        engine::fail_task(sh, g, tid, e);
                        return;
                    }
                    Localize::Missing => {
                        // Lost between queueing and dispatch: back to waiting.
                        let run = g.nodes[node].slots[slot].take();
                        if let Some(run) = run {
                            unpin_all(g, node, &run.pinned);
                        }
                        g.tasks.get_mut(&tid).unwrap().phase = Phase::Waiting;
                        engine::resolve(sh, g, tid);
                        return;
                    }
                }
            }
        }
    }
    if let Some(s) = g.nodes[node].slots[slot].as_mut() {
        s.executing = true;
    }
    sh.task_event(g, EventKind::TaskStarted, tid, Some(node), None);

    let func = sh
        .registry
        .get(&spec.function_id)
        .expect("checked at submit");
    let rule = sh
        .config
        .stragglers
        .iter()
        .find(|r| r.task == spec.label())
        .cloned();
    let seed = sh.config.seed ^ tid.0.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let ctx = TaskContext::new(tid, attempt, node, seed, stop);
    let result: TaskResult = parking_lot::MutexGuard::unlocked(g, || {
        if let Some(rule) = rule {
            if rule.stall {
                while ctx.sleep(Duration::from_millis(50)) {}
            } else {
                ctx.sleep(Duration::from_millis(rule.delay_ms));
            }
        }
        if ctx.should_stop() {
            return Err(crate::error::TaskError::new("stopped"));
        }
        match catch_unwind(AssertUnwindSafe(|| func(&ctx, &args))) {
            Ok(r) => r,
            Err(_) => Err(crate::error::TaskError::new("task panicked")),
        }
    });
    drop(args);

    if !attempt_current(g, tid, attempt, node, slot) || g.nodes[node].epoch != epoch {
        debug!(task = %tid, attempt, "discarding result of a stale attempt");
        return;
    }
    match result {
        Ok(outputs) if outputs.len() == spec.num_returns => {
            seal_outputs(sh, g, node, slot, gen, epoch, tid, attempt, outputs);
        }
        Ok(outputs) => {
            let msg = format!(
                "returned {} values, expected {}",
                outputs.len(),
                spec.num_returns
            );
            finish_failed(sh, g, node, slot, tid, msg);
        }
        Err(e) => finish_failed(sh, g, node, slot, tid, e.0),
    }
}

fn finish_failed(
    sh: &Arc<Shared>,
    g: &mut Guard<'_>,
    node: NodeId,
    slot: usize,
    tid: TaskId,
    msg: String,
) {
    if let Some(run) = g.nodes[node].slots[slot].take() {
        unpin_all(g, node, &run.pinned);
    }
    engine::fail_task(
        sh,
        g,
        tid,
        Error::TaskFailed {
            task: tid,
            message: msg,
        },
    );
}

#[allow(clippy::too_many_arguments)]
fn seal_outputs(
    sh: &Arc<Shared>,
    g: &mut Guard<'_>,
    node: NodeId,
    slot: usize,
    _gen: u64,
    epoch: u64,
    tid: TaskId,
    attempt: u32,
    outputs: Vec<Bytes>,
) {
    let returns = g.tasks[&tid].returns.clone();
    let persist = g.tasks[&tid].spec.persist_returns;
    let mut write_through = Vec::new();
    for (oid, bytes) in returns.into_iter().zip(outputs) {
        let (state, live) = match g.objects.get(&oid) {
            Some(e) => (e.state.clone(), e.live()),
            None => continue,
        };
        if state == ObjState::Sealed && g.available(oid) {
            // A surviving sibling of a re-executed task: only verify.
            engine::record_seal(sh, g, oid, &bytes, node);
            continue;
        }
        if state != ObjState::Pending && state != ObjState::Sealed {
            continue;
        }
        if !live {
            // Nobody will read it; seal without storing.
            engine::record_seal(sh, g, oid, &bytes, node);
            continue;
        }
        let size = bytes.len() as u64;
        match engine::allocate(sh, g, node, epoch, size, AllocKind::TaskReturn, Some(slot)) {
            AllocOutcome::Granted => {
                if !attempt_current(g, tid, attempt, node, slot) {
                    g.nodes[node].store.release(size);
                    return;
                }
                engine::record_seal(sh, g, oid, &bytes, node);
                g.nodes[node].store.insert_mem(oid, bytes.clone());
                if persist {
                    write_through.push((oid, bytes));
                }
            }
            AllocOutcome::FallbackDisk => {
                let file_id = engine::reserve_file_ids(&mut g.nodes[node].store, 1);
                let dir = g.nodes[node].store.dir.clone();
                let victims = [(oid, bytes.clone())];
                let res = parking_lot::MutexGuard::unlocked(g, || {
                    spill::write_spill_file(&dir, file_id, &victims)
                });
                if !attempt_current(g, tid, attempt, node, slot) || g.nodes[node].epoch != epoch {
                    return;
                }
                match res {
                    Ok(f) => {
                        let e = &f.entries[0];
                        let addr = SpillAddress {
                            file_id,
                            path: Arc::new(f.path.clone()),
                            offset: e.offset,
                            length: e.length,
                            checksum: e.checksum,
                        };
                        engine::record_seal(sh, g, oid, &bytes, node);
                        let m = &mut g.nodes[node].metrics;
                        m.bytes_spilled += f.total_bytes;
                        m.spill_files_created += 1;
                        g.nodes[node].store.insert_spilled(oid, size, addr);
                        sh.object_event(g, EventKind::ObjectSpilled, oid, node, Some("fallback"));
                    }
                    Err(e) => {
                        finish_failed(sh, g, node, slot, tid, format!("cannot store output: {e}"));
                        return;
                    }
                }
            }
            AllocOutcome::Stale => return,
        }
        engine::notify_sealed(sh, g, oid);
        // All references may have gone while the allocation waited.
        engine::maybe_free(sh, g, oid);
        sh.changed.notify_all();
    }
    write_through.retain(|(oid, _)| g.nodes[node].store.has_mem(*oid));
    if !write_through.is_empty() {
        let n = &mut g.nodes[node];
        for (oid, _) in &write_through {
            if let Some(c) = n.store.copies.get_mut(oid) {
                c.spilling = true;
            }
        }
        n.store.spills_in_flight += 1;
        n.io_jobs.push_back(IoJob::Spill {
            victims: write_through,
            write_through: true,
        });
        sh.work[node].notify_all();
    }
    if let Some(run) = g.nodes[node].slots[slot].take() {
        unpin_all(g, node, &run.pinned);
    }
    g.tasks.get_mut(&tid).unwrap().phase = Phase::Finished;
    sh.task_event(g, EventKind::TaskFinished, tid, Some(node), None);
    g.counters.tasks_finished += 1;
    engine::release_task_pins(sh, g, tid);
    sh.changed.notify_all();
    engine::fire_task_count_triggers(sh, g);
}

fn io_lane(sh: &Arc<Shared>, node: NodeId, epoch: u64) {
    let mut g = sh.state.lock();
    loop {
        if g.shutdown || g.nodes[node].epoch != epoch {
            return;
        }
        let Some(job) = g.nodes[node].io_jobs.pop_front() else {
            sh.work[node].wait(&mut g);
            continue;
        };
        match job {
            IoJob::Spill {
                victims,
                write_through,
            } => spill_job(sh, &mut g, node, epoch, victims, write_through),
            IoJob::Prefetch(tid) => prefetch_job(sh, &mut g, node, epoch, tid),
        }
    }
}

fn spill_job(
    sh: &Arc<Shared>,
    g: &mut Guard<'_>,
    node: NodeId,
    epoch: u64,
    victims: Vec<(ObjectId, Bytes)>,
    write_through: bool,
) {
    let fuse = sh.config.store.fuse_threshold;
    let count = engine::file_ids_needed(&victims, fuse);
    let first = engine::reserve_file_ids(&mut g.nodes[node].store, count);
    let dir = g.nodes[node].store.dir.clone();
    let res =
        parking_lot::MutexGuard::unlocked(g, || engine::write_victims(&dir, first, &victims, fuse));
    if g.nodes[node].epoch != epoch {
        return;
    }
    let ids: Vec<ObjectId> = victims.iter().map(|(id, _)| *id).collect();
    match res {
        Ok(files) => engine::finish_spill(sh, g, node, &files, &ids, write_through),
        Err(e) => {
            warn!(node, error = %e, "spill write failed");
            engine::finish_spill(sh, g, node, &[], &ids, write_through);
        }
    }
    let st = &mut g.nodes[node].store;
    st.spills_in_flight = st.spills_in_flight.saturating_sub(1);
    sh.changed.notify_all();
}

/// Best effort: restore or pull the queued task's arguments into spare
/// memory so the executor finds them resident.
fn prefetch_job(sh: &Arc<Shared>, g: &mut Guard<'_>, node: NodeId, epoch: u64, tid: TaskId) {
    let deps = match g.tasks.get(&tid) {
        Some(t) if t.phase == Phase::Queued(node) => t.deps.clone(),
        _ => return,
    };
    for oid in deps {
        let st: &mut State = g;
        if st.nodes[node].epoch != epoch {
            return;
        }
        if !st.available(oid)
            || st.nodes[node].store.has_mem(oid)
            || st.nodes[node].store.inflight_fetch.contains(&oid)
        {
            continue;
        }
        let size = st.objects[&oid].size.unwrap_or(0);
        let store = &mut st.nodes[node].store;
        if !store.alloc_queue.is_empty() || store.used + size > store.limit {
            return;
        }
        let Some(src) = find_source(st, oid, node) else {
            continue;
        };
        let store = &mut st.nodes[node].store;
        store.reserve(size);
        store.inflight_fetch.insert(oid);
        let res = parking_lot::MutexGuard::unlocked(g, || read_source(sh, oid, &src));
        let st: &mut State = g;
        if st.nodes[node].epoch != epoch {
            return;
        }
        st.nodes[node].store.inflight_fetch.remove(&oid);
        sh.changed.notify_all();
        let still_needed = st.objects.get(&oid).is_some_and(|e| e.live());
        match res {
            Ok(bytes) if still_needed => {
                install_fetched(st, node, oid, bytes, &src);
                account_fetch(sh, st, oid, node, &src, size, Some(tid));
            }
            Ok(_) => st.nodes[node].store.release(size),
            Err(_) => {
                st.nodes[node].store.release(size);
                source_failed(sh, st, oid, &src);
            }
        }
    }
}

fn timer(sh: &Arc<Shared>) {
    let mut g = sh.state.lock();
    loop {
        if g.shutdown {
            return;
        }
        let now = sh.started.elapsed();
        let mut next: Option<Duration> = None;
        let mut due = Vec::new();
        for (i, (p, fired)) in g.plan.iter().enumerate() {
            if let crate::cluster::Trigger::AtTimeMs(ms) = p.trigger {
                if *fired {
                    continue;
                }
                let at = Duration::from_millis(ms);
                if at <= now {
                    due.push(i);
                } else {
                    next = Some(next.map_or(at, |n: Duration| n.min(at)));
                }
            }
        }
        for i in due {
            g.plan[i].1 = true;
            let action = g.plan[i].0.action;
            engine::apply_failure(sh, &mut g, action);
        }
        match next {
            Some(at) => {
                let wait = at.saturating_sub(sh.started.elapsed());
                sh.changed.wait_for(&mut g, wait);
            }
            None => {
                if !g
                    .plan
                    .iter()
                    .any(|(p, f)| !f && matches!(p.trigger, crate::cluster::Trigger::AtTimeMs(_)))
                {
                    return;
                }
            }
        }
    }
}

pub(crate) fn stop_all(st: &mut State) {
    for t in st.tasks.values() {
        t.stop.store(true, Ordering::Relaxed);
    }
}
