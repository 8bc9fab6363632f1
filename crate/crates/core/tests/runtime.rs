use std::time::{Duration, Instant};

use bytes::Bytes;
use shufflekit::runtime::EventKind;
use shufflekit::{
    start_cluster, ClusterConfig, Error, FailureAction, FailurePlan, FunctionRegistry, Runtime,
    StoreConfig, StragglerRule, TaskError, TaskSpec, Trigger,
};

const T: Option<Duration> = Some(Duration::from_secs(30));

fn registry() -> FunctionRegistry {
    let mut reg = FunctionRegistry::new();
    // make(len, fill) -> `len` bytes of `fill`
    reg.register("make", |_, args| {
        let spec = &args[0];
        let len = u32::from_le_bytes(spec[..4].try_into().unwrap()) as usize;
        Ok(vec![Bytes::from(vec![spec[4]; len])])
    });
    // fan(n) -> n small values
    reg.register("fan", |ctx, args| {
        let n = args[0][0] as usize;
        Ok((0..n)
            .map(|i| Bytes::from(format!("{}-{i}", ctx.task_id)))
            .collect())
    });
    reg.register("concat", |_, args| Ok(vec![args.concat().into()]));
    reg.register("sleep", |ctx, args| {
        let ms = u64::from_le_bytes(args[0][..8].try_into().unwrap());
        ctx.sleep(Duration::from_millis(ms));
        Ok(vec![Bytes::from_static(b"slept")])
    });
    reg.register("rand", |ctx, _| {
        use rand::RngCore;
        let mut buf = vec![0u8; 64];
        ctx.rng().fill_bytes(&mut buf);
        Ok(vec![buf.into()])
    });
    reg.register("boom", |_, _| Err(TaskError::new("boom")));
    reg
}

fn make(len: u32, fill: u8) -> TaskSpec {
    let mut a = len.to_le_bytes().to_vec();
    a.push(fill);
    TaskSpec::new("make").inline(a)
}

fn sleep(ms: u64) -> TaskSpec {
    TaskSpec::new("sleep").inline(ms.to_le_bytes().to_vec())
}

fn cluster(nodes: usize, slots: usize, mem: u64) -> Runtime {
    let store = StoreConfig {
        memory_limit: mem,
        ..Default::default()
    };
    start_cluster(ClusterConfig::new(nodes, slots, store), registry()).unwrap()
}

#[test]
fn submit_returns_immediately() {
    let rt = cluster(2, 2, 1 << 20);
    let t0 = Instant::now();
    let refs = rt.submit(sleep(300).named("slow")).unwrap();
    assert_eq!(refs.len(), 1);
    assert!(t0.elapsed() < Duration::from_millis(150));
    let mut all = Vec::new();
    for _ in 0..10 {
        all.extend(
            rt.submit(TaskSpec::new("fan").inline(vec![10]).returns(10))
                .unwrap(),
        );
    }
    assert_eq!(all.len(), 100);
    let ids: std::collections::HashSet<_> = all.iter().map(|r| r.id()).collect();
    assert_eq!(ids.len(), 100);
    assert!(!rt.get(&all[13], T).unwrap().is_empty());
}

#[test]
fn unknown_function_and_dead_reference() {
    let rt = cluster(1, 1, 1 << 20);
    assert!(matches!(
        rt.submit(TaskSpec::new("nope")),
        Err(Error::UnknownFunction(_))
    ));
    let r = rt.submit1(make(100, 1)).unwrap();
    rt.get(&r, T).unwrap();
    rt.drop_ref(&r).unwrap();
    assert_eq!(
        rt.submit(TaskSpec::new("concat").arg(&r)),
        Err(Error::DeadReference(r.id()))
    );
    assert_eq!(rt.get(&r, T), Err(Error::DeadReference(r.id())));
    assert_eq!(rt.drop_ref(&r), Err(Error::DoubleDrop(r.id())));
}

#[test]
fn get_is_stable_and_chains() {
    let rt = cluster(2, 2, 1 << 20);
    let a = rt.submit1(make(100, 7)).unwrap();
    let b = rt.submit1(make(50, 8)).unwrap();
    let c = rt.submit1(TaskSpec::new("concat").arg(&a).arg(&b)).unwrap();
    let v1 = rt.get(&c, T).unwrap();
    let v2 = rt.get(&c, T).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(v1.len(), 150);
    assert_eq!(&v1[..100], &[7u8; 100][..]);
    assert_eq!(rt.object_size(&c), Some(150));
    let trace = rt.trace();
    trace.check_ordering().unwrap();
}

#[test]
fn get_times_out() {
    let rt = cluster(1, 1, 1 << 20);
    let r = rt.submit1(sleep(500)).unwrap();
    assert_eq!(
        rt.get(&r, Some(Duration::from_millis(50))),
        Err(Error::Timeout(Duration::from_millis(50)))
    );
    assert!(rt.get(&r, T).is_ok());
}

#[test]
fn wait_returns_the_fast_one() {
    let rt = cluster(1, 2, 1 << 20);
    let slow = rt.submit1(sleep(400)).unwrap();
    let fast = rt.submit1(sleep(10)).unwrap();
    let w = rt.wait(&[slow.clone(), fast.clone()], 1, T).unwrap();
    assert_eq!(
        w.ready.iter().map(|r| r.id()).collect::<Vec<_>>(),
        vec![fast.id()]
    );
    assert_eq!(
        w.pending.iter().map(|r| r.id()).collect::<Vec<_>>(),
        vec![slow.id()]
    );
    assert!(!w.timed_out);
    let w = rt
        .wait(
            std::slice::from_ref(&slow),
            1,
            Some(Duration::from_millis(20)),
        )
        .unwrap();
    assert!(w.timed_out);
    assert!(matches!(
        rt.wait(&[slow], 2, T),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn cancel_semantics() {
    let rt = cluster(1, 1, 1 << 20);
    let blocker = rt.submit1(sleep(300)).unwrap();
    let queued = rt.submit1(make(10, 1)).unwrap();
    assert!(rt.cancel(&queued));
    assert!(
        rt.cancel(&queued),
        "cancel is idempotent while not finished"
    );
    assert_eq!(rt.get(&queued, T), Err(Error::Cancelled(queued.id())));
    rt.get(&blocker, T).unwrap();
    assert!(!rt.cancel(&blocker));
    assert!(rt.get(&blocker, T).is_ok());
    let trace = rt.trace();
    let started: Vec<_> = trace
        .of_kind(EventKind::TaskStarted)
        .map(|e| e.subject.clone())
        .collect();
    assert!(!started.contains(&queued.creator_task.to_string()));
    assert!(!rt.is_sealed(queued.id()));

    // A running task stops cooperatively.
    let long = rt.submit1(sleep(10_000)).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    let t0 = Instant::now();
    assert!(rt.cancel(&long));
    assert!(rt.wait_idle(Duration::from_secs(5)));
    assert!(t0.elapsed() < Duration::from_secs(2));
    assert!(!rt.is_sealed(long.id()));
}

#[test]
fn task_failure_propagates() {
    let rt = cluster(1, 1, 1 << 20);
    let bad = rt.submit1(TaskSpec::new("boom")).unwrap();
    let child = rt.submit1(TaskSpec::new("concat").arg(&bad)).unwrap();
    assert!(matches!(rt.get(&bad, T), Err(Error::TaskFailed { .. })));
    assert!(matches!(rt.get(&child, T), Err(Error::TaskFailed { .. })));
}

#[test]
fn inline_limit_is_enforced() {
    let rt = cluster(1, 1, 1 << 20);
    let res = rt.submit(TaskSpec::new("concat").inline(vec![0u8; 2000]));
    assert_eq!(
        res,
        Err(Error::InlineTooLarge {
            size: 2000,
            limit: 1024
        })
    );
}

#[test]
fn drop_releases_memory() {
    let rt = cluster(1, 1, 4 << 20);
    let r = rt.submit1(make(1 << 20, 3)).unwrap();
    rt.get(&r, T).unwrap();
    assert_eq!(rt.memory_used(0), 1 << 20);
    rt.drop_ref(&r).unwrap();
    assert_eq!(rt.memory_used(0), 0);
}

#[test]
fn refcount_conservation_at_quiescence() {
    let rt = cluster(2, 2, 2 << 20);
    let mut outs = Vec::new();
    for i in 0..20u8 {
        let a = rt.submit1(make(200_000, i)).unwrap();
        let b = rt.submit1(TaskSpec::new("concat").arg(&a).arg(&a)).unwrap();
        rt.drop_ref(&a).unwrap();
        outs.push(b);
    }
    for o in &outs {
        assert_eq!(rt.get(o, T).unwrap().len(), 400_000);
    }
    rt.drop_refs(&outs).unwrap();
    assert!(rt.wait_idle(Duration::from_secs(10)));
    assert_eq!(rt.total_memory_used(), 0);
}

#[test]
fn spill_and_restore_round_trip() {
    let rt = cluster(1, 1, 8 << 20);
    let r = rt.put(vec![42u8; 100_000], 0).unwrap();
    let before = rt.get(&r, T).unwrap();
    let freed = rt.spill(0, 1).unwrap();
    assert_eq!(freed, 100_000);
    assert_eq!(rt.memory_used(0), 0);
    assert!(!rt.locations(r.id())[0].in_memory);
    rt.restore(r.id(), 0).unwrap();
    let loc = &rt.locations(r.id())[0];
    assert!(
        loc.in_memory && loc.spilled,
        "spill copy is kept after restore"
    );
    assert_eq!(rt.get(&r, T).unwrap(), before);
    let m = rt.metrics().total;
    assert_eq!(m.bytes_spilled, 100_000);
    assert_eq!(m.bytes_restored, 100_000);
    assert_eq!(m.spill_files_created, 1);
}

#[test]
fn spill_with_nothing_evictable() {
    let rt = cluster(1, 1, 1 << 20);
    assert_eq!(rt.spill(0, 10), Err(Error::NothingToSpill(0)));
}

#[test]
fn put_validation_and_pressure() {
    let rt = cluster(1, 1, 1 << 20);
    assert_eq!(rt.put(Bytes::new(), 0), Err(Error::EmptyValue));
    assert_eq!(
        rt.put(vec![0u8; 2 << 20], 0),
        Err(Error::ObjectTooLarge {
            size: 2 << 20,
            limit: 1 << 20
        })
    );
    // Filling beyond the limit spills older objects instead of failing.
    let refs: Vec<_> = (0..6u8)
        .map(|i| rt.put(vec![i; 300_000], 0).unwrap())
        .collect();
    assert!(rt.memory_used(0) <= 1 << 20);
    assert!(rt.metrics().total.bytes_spilled > 0);
    for (i, r) in refs.iter().enumerate() {
        assert_eq!(rt.get(r, T).unwrap(), vec![i as u8; 300_000]);
    }
}

#[test]
fn pull_meters_network_bytes() {
    let rt = cluster(2, 1, 4 << 20);
    let r = rt.put(vec![1u8; 1 << 20], 0).unwrap();
    rt.pull(r.id(), 0, 0).unwrap();
    assert_eq!(rt.metrics().total.network_bytes, 0);
    rt.pull(r.id(), 0, 1).unwrap();
    assert_eq!(rt.metrics().total.network_bytes, 1 << 20);
    assert_eq!(rt.locations(r.id()).len(), 2);
}

#[test]
fn single_node_has_no_network_traffic() {
    let rt = cluster(1, 2, 4 << 20);
    let a = rt.submit1(make(1000, 1)).unwrap();
    let b = rt.submit1(TaskSpec::new("concat").arg(&a)).unwrap();
    rt.get(&b, T).unwrap();
    assert_eq!(rt.metrics().total.network_bytes, 0);
}

#[test]
fn lost_object_is_rebuilt_from_lineage() {
    let rt = cluster(2, 1, 4 << 20);
    let a = rt.submit1(make(1000, 5).on_node(1)).unwrap();
    let b = rt
        .submit1(TaskSpec::new("concat").arg(&a).arg(&a).on_node(1))
        .unwrap();
    let before = rt.get(&b, T).unwrap();
    // Reading on the driver does not move ownership; node 1 holds the only copies.
    rt.kill_node(1).unwrap();
    assert!(rt.locations(b.id()).is_empty());
    assert_eq!(rt.get(&b, T).unwrap(), before);
    let m = rt.metrics();
    assert!(m.reconstructions >= 2, "a and b are both replayed");
    assert_eq!(m.replay_mismatches, 0);
    assert!(m.replay_checks >= 2);
    let trace = rt.trace();
    let retried: Vec<_> = trace
        .of_kind(EventKind::TaskRetried)
        .map(|e| e.subject.clone())
        .collect();
    assert_eq!(retried.len(), 2);
    assert!(rt
        .trace()
        .of_kind(EventKind::TaskStarted)
        .filter(|e| e.ts_us > 0)
        .all(|e| e.node != Some(1)
            || e.ts_us < trace.of_kind(EventKind::NodeFailed).next().unwrap().ts_us));
}

#[test]
fn only_the_lost_task_is_replayed_when_inputs_survive() {
    let rt = cluster(2, 1, 4 << 20);
    let a = rt.submit1(make(1000, 5).on_node(0)).unwrap();
    let b = rt
        .submit1(TaskSpec::new("concat").arg(&a).on_node(1))
        .unwrap();
    let before = rt.get(&b, T).unwrap();
    rt.kill_node(1).unwrap();
    assert_eq!(rt.get(&b, T).unwrap(), before);
    assert_eq!(rt.trace().of_kind(EventKind::TaskRetried).count(), 1);
    assert_eq!(rt.metrics().reconstructions, 1);
}

#[test]
fn lost_root_is_not_reconstructible() {
    let rt = cluster(2, 1, 4 << 20);
    let r = rt.put(vec![1u8; 10], 1).unwrap();
    rt.kill_node(1).unwrap();
    assert_eq!(rt.get(&r, T), Err(Error::NonReconstructibleRoot(r.id())));
}

#[test]
fn reconstruct_live_object_is_noop() {
    let rt = cluster(1, 1, 4 << 20);
    let a = rt.submit1(make(10, 1)).unwrap();
    rt.get(&a, T).unwrap();
    rt.reconstruct(a.id()).unwrap();
    assert_eq!(rt.metrics().reconstructions, 0);
}

#[test]
fn replays_see_identical_randomness() {
    let rt = cluster(2, 1, 4 << 20);
    let a = rt.submit1(TaskSpec::new("rand").on_node(1)).unwrap();
    let first = rt.get(&a, T).unwrap();
    rt.kill_node(1).unwrap();
    assert_eq!(rt.get(&a, T).unwrap(), first);
}

#[test]
fn executor_kill_retries_without_reconstruction() {
    let rt = cluster(1, 2, 4 << 20);
    let r = rt.submit1(sleep(300).named("victim")).unwrap();
    std::thread::sleep(Duration::from_millis(60));
    let running = rt.running_tasks();
    assert_eq!(running.len(), 1);
    rt.kill_executor(0, running[0].slot).unwrap();
    assert_eq!(rt.get(&r, T).unwrap(), Bytes::from_static(b"slept"));
    let m = rt.metrics();
    assert_eq!(m.task_retries, 1);
    assert_eq!(m.reconstructions, 0);
    assert_eq!(rt.lineage(r.creator_task).unwrap().attempt, 1);

    // Killing an idle executor retries nothing.
    rt.kill_executor(0, 0).unwrap();
    rt.kill_executor(0, 1).unwrap();
    let r2 = rt.submit1(make(10, 1)).unwrap();
    rt.get(&r2, T).unwrap();
    assert_eq!(rt.metrics().task_retries, 1);
}

#[test]
fn planned_failures_fire_once() {
    let plan = FailurePlan::none()
        .with(Trigger::AfterKTasks(3), FailureAction::KillNode(1))
        .with(Trigger::AtTimeMs(50), FailureAction::RestartNode(1));
    let cfg = ClusterConfig::new(2, 1, StoreConfig::default()).with_failures(plan);
    let rt = start_cluster(cfg, registry()).unwrap();
    let refs: Vec<_> = (0..10u8)
        .map(|i| rt.submit1(make(100, i).on_node(1)).unwrap())
        .collect();
    for (i, r) in refs.iter().enumerate() {
        assert_eq!(rt.get(r, T).unwrap(), vec![i as u8; 100]);
    }
    std::thread::sleep(Duration::from_millis(100));
    assert!(rt.is_alive(1));
    let kills = rt.trace().of_kind(EventKind::NodeFailed).count();
    assert!((1..=2).contains(&kills));
}

#[test]
fn straggler_delay_applies_by_label() {
    let cfg = ClusterConfig::new(1, 2, StoreConfig::default())
        .with_straggler(StragglerRule::delay("slow", Duration::from_millis(200)));
    let rt = start_cluster(cfg, registry()).unwrap();
    let t0 = Instant::now();
    let fast = rt.submit1(make(10, 1).named("fast")).unwrap();
    rt.get(&fast, T).unwrap();
    assert!(t0.elapsed() < Duration::from_millis(150));
    let slow = rt.submit1(make(10, 1).named("slow")).unwrap();
    rt.get(&slow, T).unwrap();
    assert!(t0.elapsed() >= Duration::from_millis(200));
}

#[test]
fn trace_exports_as_jsonl() {
    let rt = cluster(1, 1, 1 << 20);
    let a = rt.submit1(make(10, 1)).unwrap();
    rt.get(&a, T).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let trace = rt.trace();
    trace.write_jsonl(&path).unwrap();
    let back = shufflekit::SchedulerTrace::read_jsonl(&path).unwrap();
    assert_eq!(back.events.len(), trace.events.len());
    assert!(back.of_kind(EventKind::ObjectSealed).count() >= 1);
}
