use proptest::prelude::*;
use shufflekit::runtime::trace::EventKind;
use shufflekit::shuffle::{
    oracle_checksum, output_checksum, read_partition, run_variant, ShuffleConfig, Speculation,
    Variant,
};
use shufflekit::sortbench::{self, gen_input, gen_partition, partition_records, KeyDistribution};
use shufflekit::{
    start_cluster, ClusterConfig, FailureAction, FailurePlan, ObjectRef, Runtime, StoreConfig,
    Trigger,
};

fn cluster_with(cfg: ClusterConfig) -> Runtime {
    start_cluster(cfg, sortbench::registry()).unwrap()
}

fn input(rt: &Runtime, m: u64, per: u64, seed: u64) -> (Vec<ObjectRef>, Vec<u8>) {
    let dist = KeyDistribution::Uniform;
    let refs = gen_input(rt, m * per, m, seed, dist, rt.num_nodes()).unwrap();
    let all = (0..m)
        .flat_map(|i| gen_partition(seed, i, partition_records(m * per, m, i), dist))
        .collect();
    (refs, all)
}

fn config_for(variant: Variant, r: usize, f: usize, p: usize) -> ShuffleConfig {
    let mut cfg = ShuffleConfig {
        r,
        f,
        p,
        ..Default::default()
    };
    match variant {
        Variant::Speculative => {
            cfg.speculation = Some(Speculation {
                delay_ms: 5,
                max_dups: 1,
            })
        }
        Variant::DynamicRepartition => cfg.skew_memory_threshold = Some(20_000),
        Variant::BestEffort => cfg.merge_timeout_ms = Some(1_000),
        _ => {}
    }
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Every sorting variant, for any shape that fits the tail rules, is a
    /// permutation of the input that is globally sorted in partition order.
    #[test]
    fn variants_sort_any_shape(
        v in 0..Variant::SORTING.len(),
        m in 1u64..9,
        r in 1usize..7,
        f in 1usize..5,
        p in 1usize..5,
        per in 1u64..300,
        nodes in 1usize..4,
        seed in any::<u64>(),
    ) {
        let variant = Variant::SORTING[v];
        let rt = cluster_with(ClusterConfig::new(nodes, 2, StoreConfig::default()).with_seed(seed));
        let (inputs, all) = input(&rt, m, per, seed);
        let out = run_variant(&rt, variant, &config_for(variant, r, f, p), &inputs).unwrap();
        out.wait(&rt).unwrap();
        let mut concat = Vec::new();
        for runs in &out.partitions {
            concat.extend_from_slice(&read_partition(&rt, runs).unwrap());
        }
        prop_assert_eq!(concat.len(), all.len());
        prop_assert!(concat.chunks_exact(100).zip(concat.chunks_exact(100).skip(1)).all(|(a, b)| a <= b));
        prop_assert_eq!(output_checksum(&rt, &out).unwrap(), oracle_checksum(&all));
        prop_assert!(rt.trace().check_ordering().is_ok());
    }
}

#[test]
fn memory_stays_under_the_limit_while_spilling() {
    let limit = 400_000;
    let rt = cluster_with(ClusterConfig::new(
        2,
        2,
        StoreConfig {
            memory_limit: limit,
            ..Default::default()
        },
    ));
    // 3.2 MB of input against 0.8 MB of cluster memory.
    let (inputs, all) = input(&rt, 16, 2_000, 4);
    let out = run_variant(&rt, Variant::Simple, &ShuffleConfig::new(8), &inputs).unwrap();
    out.wait(&rt).unwrap();
    assert_eq!(output_checksum(&rt, &out).unwrap(), oracle_checksum(&all));
    let m = rt.metrics();
    assert!(m.total.bytes_spilled > 0);
    for node in 0..2 {
        assert!(
            rt.peak_memory_used(node) <= limit + rt.max_object_size(),
            "node {node} peaked at {} with limit {limit}",
            rt.peak_memory_used(node)
        );
    }
}

#[test]
fn nothing_runs_on_a_dead_node() {
    let plan = FailurePlan::none().with(Trigger::AfterKTasks(12), FailureAction::KillNode(2));
    let rt = cluster_with(ClusterConfig::new(3, 2, StoreConfig::default()).with_failures(plan));
    let (inputs, all) = input(&rt, 12, 500, 5);
    let cfg = ShuffleConfig {
        r: 6,
        map_work_ms: 5,
        ..Default::default()
    };
    let out = run_variant(&rt, Variant::Simple, &cfg, &inputs).unwrap();
    out.wait(&rt).unwrap();
    assert_eq!(output_checksum(&rt, &out).unwrap(), oracle_checksum(&all));
    assert!(!rt.is_alive(2));
    let trace = rt.trace();
    let died = trace
        .of_kind(EventKind::NodeFailed)
        .next()
        .expect("node failure recorded")
        .ts_us;
    let late: Vec<_> = trace
        .of_kind(EventKind::TaskStarted)
        .filter(|e| e.ts_us > died && e.node == Some(2))
        .map(|e| e.label.clone())
        .collect();
    assert!(late.is_empty(), "started on dead node: {late:?}");
}

#[test]
fn drained_store_is_empty_after_a_shuffle() {
    let rt = cluster_with(ClusterConfig::new(
        2,
        2,
        StoreConfig {
            memory_limit: 300_000,
            ..Default::default()
        },
    ));
    let (inputs, _) = input(&rt, 8, 1_000, 6);
    let out = run_variant(
        &rt,
        Variant::PushStar,
        &ShuffleConfig {
            r: 4,
            p: 2,
            ..Default::default()
        },
        &inputs,
    )
    .unwrap();
    out.wait(&rt).unwrap();
    out.release(&rt).unwrap();
    rt.drop_refs(&inputs).unwrap();
    assert!(rt.wait_idle(std::time::Duration::from_secs(10)));
    assert_eq!(rt.total_memory_used(), 0);
}
