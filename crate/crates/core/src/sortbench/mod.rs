//! Sort benchmark harness: generates input, runs one shuffle variant on a
//! fresh cluster, validates the output and reports metrics.

mod gen;
mod validate;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use gen::{
    gen_input, gen_partition, gen_record, gen_spec, input_digest, partition_records,
    KeyDistribution, RecordDigest, GEN,
};
pub use validate::{validate_partitions, Validation, ValidationFailed, Validator};

use crate::checksum::Fnv1a;
use crate::cluster::{start_cluster, ClusterConfig, FailureAction, FailurePlan, Trigger};
use crate::error::{Error, Result};
use crate::ids::NodeId;
use crate::runtime::trace::EventKind;
use crate::runtime::{FunctionRegistry, Runtime, SchedulerTrace};
use crate::shuffle::{self, PartitionerKind, ShuffleConfig, ShuffleStats, Variant, RECORD_SIZE};
use crate::store::IoMetrics;

/// Kill `node` once `fraction` of the run's tasks have finished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KillAt {
    pub node: NodeId,
    pub fraction: f64,
}

impl std::str::FromStr for KillAt {
    type Err = Error;

    /// `<node>@<fraction>`, e.g. `1@0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected <node>@<fraction>, got `{s}`"));
        let (node, fraction) = s.split_once('@').ok_or_else(bad)?;
        let node = node.trim().parse().map_err(|_| bad())?;
        let fraction: f64 = fraction.trim().parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(bad());
        }
        Ok(KillAt { node, fraction })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Total input bytes; a multiple of the 100-byte record size.
    pub data_size: u64,
    /// Bytes per input partition; M = data_size / partition_size unless
    /// `shuffle.M` says otherwise.
    pub partition_size: u64,
    pub variant: Variant,
    pub shuffle: ShuffleConfig,
    pub cluster: ClusterConfig,
    pub failures: FailurePlan,
    pub kill_node: Option<KillAt>,
    pub key_distribution: KeyDistribution,
    pub seed: u64,
    /// Modelled disk bandwidth in bytes per second, for the baseline only.
    pub disk_bandwidth_model: f64,
    /// Where to write the JSON report.
    pub output: Option<PathBuf>,
    /// Where to write the JSONL scheduler trace.
    pub trace: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_size: 10 << 20,
            partition_size: 1 << 20,
            variant: Variant::Simple,
            shuffle: ShuffleConfig::default(),
            cluster: ClusterConfig::default(),
            failures: FailurePlan::none(),
            kill_node: None,
            key_distribution: KeyDistribution::Uniform,
            seed: 0,
            disk_bandwidth_model: 1e9,
            output: None,
            trace: None,
        }
    }
}

impl RunConfig {
    pub fn records(&self) -> u64 {
        self.data_size / RECORD_SIZE as u64
    }

    pub fn num_partitions(&self) -> usize {
        match self.shuffle.m {
            0 => self.data_size.div_ceil(self.partition_size.max(1)) as usize,
            m => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_size == 0 || !self.data_size.is_multiple_of(RECORD_SIZE as u64) {
            return Err(Error::InvalidArgument(format!(
                "data_size {} is not a positive multiple of {RECORD_SIZE}",
                self.data_size
            )));
        }
        if self.partition_size == 0 {
            return Err(Error::InvalidArgument(
                "partition_size must be positive".into(),
            ));
        }
        let m = self.num_partitions();
        if self.records() < m as u64 {
            return Err(Error::InvalidArgument(format!(
                "{} records cannot fill {m} partitions",
                self.records()
            )));
        }
        if self.disk_bandwidth_model.is_nan() || self.disk_bandwidth_model <= 0.0 {
            return Err(Error::InvalidArgument(
                "disk_bandwidth_model must be positive".into(),
            ));
        }
        if let Some(k) = self.kill_node {
            if k.node >= self.cluster.nodes {
                return Err(Error::NoSuchNode(k.node));
            }
        }
        self.shuffle.validate(m)
    }

    /// Tasks the run submits when nothing fails, used to place
    /// fraction-based failure triggers.
    pub fn expected_tasks(&self) -> u64 {
        let m = self.num_partitions();
        let r = self.shuffle.reducers(m);
        let nodes = match self.shuffle.num_nodes {
            0 => self.cluster.nodes,
            n => n.min(self.cluster.nodes),
        }
        .max(1);
        let rounds = m.div_ceil(self.shuffle.p.max(1));
        let merging_nodes = (0..nodes)
            .filter(|&n| (0..r).any(|p| shuffle::owner_of(p, r, nodes) == n))
            .count();
        let sample = if self.shuffle.partitioner == PartitionerKind::Range {
            m
        } else {
            0
        };
        let body = match self.variant {
            Variant::Simple | Variant::Speculative | Variant::DynamicRepartition => m + r,
            Variant::Riffle => m + m.div_ceil(self.shuffle.f.max(1)) + r,
            Variant::Magnet | Variant::Push | Variant::PushStar | Variant::BestEffort => {
                m + rounds * merging_nodes + r
            }
            Variant::Streaming => m + rounds * r,
        };
        (m + sample + body) as u64
    }

    /// Cluster config with the seed and every failure source folded in.
    pub fn effective_cluster(&self) -> ClusterConfig {
        let mut c = self.cluster.clone();
        c.seed = self.seed;
        c.failures
            .events
            .extend(self.failures.events.iter().copied());
        if let Some(k) = self.kill_node {
            let after = ((k.fraction * self.expected_tasks() as f64).round() as u64).max(1);
            c.failures = c
                .failures
                .with(Trigger::AfterKTasks(after), FailureAction::KillNode(k.node));
        }
        c
    }
}

/// 4D/B: every byte is read twice and written twice at bandwidth B.
pub fn theoretical_baseline_seconds(data_size: u64, disk_bandwidth: f64) -> f64 {
    4.0 * data_size as f64 / disk_bandwidth
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    /// Seconds since the cluster started.
    pub start: f64,
    pub end: f64,
    pub tasks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: Variant,
    pub data_size: u64,
    pub m: usize,
    pub r: usize,
    pub nodes: usize,
    pub seed: u64,
    /// Seconds from shuffle submission until every output partition is sealed.
    pub jct_seconds: f64,
    pub gen_seconds: f64,
    /// For streaming runs, seconds until the first partial aggregate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_partial_seconds: Option<f64>,
    /// Per task kind (`map`, `merge`, `reduce`, ...), first start to last finish.
    pub stage_times: BTreeMap<String, StageTime>,
    pub io: IoMetrics,
    /// I/O after the input was generated, i.e. caused by the shuffle itself.
    pub shuffle_io: IoMetrics,
    pub blocks_created: u64,
    pub reducer_visible_blocks: u64,
    /// Distinct map and merge output objects sealed according to the trace.
    pub trace_blocks_sealed: u64,
    pub tasks_finished: u64,
    pub task_retries: u64,
    pub reconstructions: u64,
    pub theoretical_baseline_seconds: f64,
    pub input_checksum: u64,
    /// Order-dependent digest of the concatenated output.
    pub output_checksum: u64,
    pub validation: Validation,
    pub shuffle: ShuffleStats,
}

impl BenchReport {
    /// Counters that depend only on the task graph, for comparing runs.
    pub fn counters(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("blocks_created", self.blocks_created),
            ("reducer_visible_blocks", self.reducer_visible_blocks),
            ("trace_blocks_sealed", self.trace_blocks_sealed),
            ("tasks_finished", self.tasks_finished),
            ("task_retries", self.task_retries),
            ("reconstructions", self.reconstructions),
            ("bytes_spilled", self.io.bytes_spilled),
            ("bytes_restored", self.io.bytes_restored),
            ("spill_files_created", self.io.spill_files_created),
            ("network_bytes", self.io.network_bytes),
            ("objects_created", self.io.objects_created),
        ])
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: String| out.push_str(&format!("{k:<28} {v}\n"));
        row("variant", self.variant.to_string());
        row(
            "data size",
            format!(
                "{} bytes (M={}, R={}, nodes={})",
                self.data_size, self.m, self.r, self.nodes
            ),
        );
        row("job completion time", format!("{:.3} s", self.jct_seconds));
        if let Some(t) = self.first_partial_seconds {
            row("first partial result", format!("{t:.3} s"));
        }
        for (stage, t) in &self.stage_times {
            row(
                &format!("  {stage}"),
                format!("{:.3} .. {:.3} s ({} tasks)", t.start, t.end, t.tasks),
            );
        }
        row(
            "theoretical baseline",
            format!("{:.3} s", self.theoretical_baseline_seconds),
        );
        row("blocks created", self.blocks_created.to_string());
        row(
            "bytes spilled",
            format!(
                "{} ({} during the shuffle)",
                self.io.bytes_spilled, self.shuffle_io.bytes_spilled
            ),
        );
        row("bytes restored", self.io.bytes_restored.to_string());
        row("spill files", self.io.spill_files_created.to_string());
        row("network bytes", self.io.network_bytes.to_string());
        row("task retries", self.task_retries.to_string());
        row("reconstructions", self.reconstructions.to_string());
        let v = &self.validation;
        row("sorted", v.sorted.to_string());
        row(
            "record count",
            format!("{} / {}", v.records, v.expected_records),
        );
        row(
            "checksum",
            format!(
                "{:#018x} ({})",
                v.checksum,
                if v.checksum_ok { "ok" } else { "MISMATCH" }
            ),
        );
        out
    }
}

/// Every function a benchmark run needs.
pub fn registry() -> FunctionRegistry {
    let mut reg = FunctionRegistry::new();
    shuffle::functions::register(&mut reg);
    gen::register(&mut reg);
    reg
}

fn stage_times(trace: &SchedulerTrace) -> BTreeMap<String, StageTime> {
    let mut out: BTreeMap<String, StageTime> = BTreeMap::new();
    for e in &trace.events {
        let Some(label) = &e.label else { continue };
        let stage = label.split(['-', '.']).next().unwrap_or(label).to_string();
        let t = e.ts_us as f64 / 1e6;
        match e.kind {
            EventKind::TaskStarted => {
                let s = out.entry(stage).or_insert(StageTime {
                    start: t,
                    end: t,
                    tasks: 0,
                });
                s.start = s.start.min(t);
            }
            EventKind::TaskFinished => {
                let s = out.entry(stage).or_insert(StageTime {
                    start: t,
                    end: t,
                    tasks: 0,
                });
                s.end = s.end.max(t);
                s.tasks += 1;
            }
            _ => {}
        }
    }
    out
}

/// Distinct map and merge outputs sealed in `trace`.
pub fn trace_blocks_sealed(trace: &SchedulerTrace) -> u64 {
    let subjects: std::collections::HashSet<&str> = trace
        .of_kind(EventKind::ObjectSealed)
        .filter(|e| {
            e.label
                .as_deref()
                .is_some_and(|l| l.starts_with("map-") || l.starts_with("merge-"))
        })
        .map(|e| e.subject.as_str())
        .collect();
    subjects.len() as u64
}

struct Outcome {
    stats: ShuffleStats,
    validation: Validation,
    output_checksum: u64,
    jct_seconds: f64,
    first_partial_seconds: Option<f64>,
}

fn run_sort(
    rt: &Runtime,
    cfg: &RunConfig,
    inputs: &[crate::runtime::ObjectRef],
    expected: RecordDigest,
) -> Result<Outcome> {
    let start = Instant::now();
    let out = shuffle::run_variant(rt, cfg.variant, &cfg.shuffle, inputs)?;
    out.wait(rt)?;
    let jct_seconds = start.elapsed().as_secs_f64();
    let mut v = Validator::new(expected);
    let mut h = Fnv1a::new();
    for runs in &out.partitions {
        let data = shuffle::read_partition(rt, runs)?;
        v.feed(&data);
        h.write(&data);
    }
    out.release(rt)?;
    Ok(Outcome {
        stats: out.stats,
        validation: v.finish(),
        output_checksum: h.finish(),
        jct_seconds,
        first_partial_seconds: None,
    })
}

fn run_streaming(
    rt: &Runtime,
    cfg: &RunConfig,
    inputs: &[crate::runtime::ObjectRef],
    expected: RecordDigest,
) -> Result<Outcome> {
    let start = Instant::now();
    let part = shuffle::build_partitioner(rt, &cfg.shuffle, inputs)?;
    let r = part.num_partitions();
    let stream = shuffle::streaming_sort(rt, &cfg.shuffle, inputs, &part)?;
    let rounds = stream.rounds();
    let mut first = None;
    let mut last = Vec::new();
    for partial in stream {
        let partial = partial?;
        first.get_or_insert(start.elapsed().as_secs_f64());
        last = partial.value;
    }
    let jct_seconds = start.elapsed().as_secs_f64();
    let mut v = Validator::new(expected);
    let mut h = Fnv1a::new();
    for state in &last {
        let block = shuffle::Block::decode(state)?;
        v.feed(&block.data);
        h.write(&block.data);
    }
    let m = inputs.len();
    let stats = ShuffleStats {
        variant: Some(Variant::Streaming),
        m,
        r,
        map_blocks: (m * r) as u64,
        blocks_created: (m * r) as u64,
        reducer_visible_blocks: (m * r) as u64,
        reducer_inputs: vec![m; r],
        rounds,
        ..Default::default()
    };
    Ok(Outcome {
        stats,
        validation: v.finish(),
        output_checksum: h.finish(),
        jct_seconds,
        first_partial_seconds: first,
    })
}

/// Runs one benchmark end to end on a fresh cluster. Validation failures
/// are reported in the result, not as errors.
pub fn run(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let cluster = cfg.effective_cluster();
    let nodes = cluster.nodes;
    let m = cfg.num_partitions();
    let expected = input_digest(cfg.records(), m as u64, cfg.seed, cfg.key_distribution);
    let rt = start_cluster(cluster, registry())?;

    let gen_start = Instant::now();
    let inputs = gen_input(
        &rt,
        cfg.records(),
        m as u64,
        cfg.seed,
        cfg.key_distribution,
        nodes,
    )?;
    rt.wait(&inputs, inputs.len(), None)?;
    // Let the input finish landing on disk so its writes are not billed to the shuffle.
    rt.wait_idle(std::time::Duration::from_secs(600));
    let gen_seconds = gen_start.elapsed().as_secs_f64();
    let io_after_gen = rt.metrics().total;

    let outcome = match cfg.variant {
        Variant::Streaming => run_streaming(&rt, cfg, &inputs, expected)?,
        _ => run_sort(&rt, cfg, &inputs, expected)?,
    };
    rt.drop_refs(&inputs)?;

    let metrics = rt.metrics();
    let trace = rt.trace();
    if let Some(path) = &cfg.trace {
        trace.write_jsonl(path)?;
    }
    let report = BenchReport {
        variant: cfg.variant,
        data_size: cfg.data_size,
        m,
        r: outcome.stats.r,
        nodes,
        seed: cfg.seed,
        jct_seconds: outcome.jct_seconds,
        gen_seconds,
        first_partial_seconds: outcome.first_partial_seconds,
        stage_times: stage_times(&trace),
        io: metrics.total,
        shuffle_io: metrics.total.since(&io_after_gen),
        blocks_created: outcome.stats.blocks_created,
        reducer_visible_blocks: outcome.stats.reducer_visible_blocks,
        trace_blocks_sealed: trace_blocks_sealed(&trace),
        tasks_finished: metrics.tasks_finished,
        task_retries: metrics.task_retries,
        reconstructions: metrics.reconstructions,
        theoretical_baseline_seconds: theoretical_baseline_seconds(
            cfg.data_size,
            cfg.disk_bandwidth_model,
        ),
        input_checksum: expected.checksum,
        output_checksum: outcome.output_checksum,
        validation: outcome.validation,
        shuffle: outcome.stats,
    };
    if let Some(path) = &cfg.output {
        std::fs::write(
            path,
            serde_json::to_vec_pretty(&report).map_err(|e| Error::Io(e.to_string()))?,
        )?;
    }
    Ok(report)
}
