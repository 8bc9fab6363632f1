use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use shufflekit::shuffle::{
    merge_sorted, run_variant, sort_and_partition, uniform_boundaries, ShuffleConfig, Variant,
};
use shufflekit::sortbench::{self, gen_input, gen_partition, KeyDistribution};
use shufflekit::{start_cluster, ClusterConfig, StoreConfig};

fn partition_and_merge(c: &mut Criterion) {
    let data = gen_partition(1, 0, 20_000, KeyDistribution::Uniform);
    let cuts = uniform_boundaries(16);

    let mut g = c.benchmark_group("records");
    g.throughput(Throughput::Bytes(data.len() as u64));
    g.bench_function("sort_and_partition/16", |b| {
        b.iter(|| sort_and_partition(&data, &cuts).unwrap())
    });

    let runs: Vec<_> = (0..16u64)
        .map(|i| {
            let part = gen_partition(2, i, 1_250, KeyDistribution::Uniform);
            let mut blocks = sort_and_partition(&part, &[]).unwrap();
            blocks.remove(0)
        })
        .collect();
    g.bench_function("merge_sorted/16", |b| {
        b.iter(|| merge_sorted(&runs).unwrap())
    });
    g.finish();
}

fn variants(c: &mut Criterion) {
    let mut g = c.benchmark_group("shuffle");
    g.sample_size(10);
    let (m, per) = (16u64, 5_000u64);
    g.throughput(Throughput::Bytes(m * per * 100));
    for variant in [
        Variant::Simple,
        Variant::Riffle,
        Variant::Push,
        Variant::PushStar,
    ] {
        g.bench_with_input(
            BenchmarkId::from_parameter(variant),
            &variant,
            |b, &variant| {
                let rt = start_cluster(
                    ClusterConfig::new(2, 2, StoreConfig::default()),
                    sortbench::registry(),
                )
                .unwrap();
                let inputs = gen_input(&rt, m * per, m, 3, KeyDistribution::Uniform, 2).unwrap();
                let cfg = ShuffleConfig::new(8);
                b.iter(|| {
                    let out = run_variant(&rt, variant, &cfg, &inputs).unwrap();
                    out.wait(&rt).unwrap();
                    out.release(&rt).unwrap();
                });
            },
        );
    }
    g.finish();
}

criterion_group!(benches, partition_and_merge, variants);
criterion_main!(benches);
