//! Shuffle algorithms written purely against the [`Runtime`] API.
//!
//! Every variant takes `M` input partitions (object refs holding raw
//! 100-byte records) and returns, per reduce partition, one or more sorted
//! runs. Only `dynamic_repartition` ever returns more than one run for a
//! partition; [`read_partition`] merges runs on the fly.

mod consume;
pub mod functions;
mod partition;
pub mod record;
mod stats;
mod straggler;
mod streaming;
pub mod trace_check;
mod variants;

use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

pub use consume::{pipelined_consume, Consumed};
pub use partition::{pad_boundaries, quantile_boundaries, uniform_boundaries, Partitioner};
pub use record::{
    merge_sorted, sort_and_partition, Block, Key, RecordError, KEY_SIZE, RECORD_SIZE,
};
pub use stats::{kl_divergence, BlockPlan, StatsError};
pub use straggler::{speculate_all, speculative_submit, Speculation};
pub use streaming::{
    batch_word_count, generate_text, streaming_shuffle, streaming_sort, wc_gen_spec,
    word_count_shuffle, PartialAggregate, StreamingShuffle, WordCounts,
};
pub use variants::{
    best_effort_merge, dynamic_repartition, magnet_shuffle, push_shuffle_pipelined, riffle_shuffle,
    sample_boundaries, simple_shuffle, RepartitionStats,
};

use crate::checksum::Fnv1a;
use crate::error::{Error, Result};
use crate::ids::NodeId;
use crate::runtime::{ObjectRef, Runtime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Simple,
    Riffle,
    Magnet,
    /// Pipelined rounds, map outputs kept until the end of the map phase.
    Push,
    /// Pipelined rounds, map outputs dropped as soon as their merge round is submitted.
    PushStar,
    Streaming,
    BestEffort,
    Speculative,
    DynamicRepartition,
}

impl Variant {
    pub const SORTING: [Variant; 8] = [
        Variant::Simple,
        Variant::Riffle,
        Variant::Magnet,
        Variant::Push,
        Variant::PushStar,
        Variant::BestEffort,
        Variant::Speculative,
        Variant::DynamicRepartition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simple => "simple",
            Variant::Riffle => "riffle",
            Variant::Magnet => "magnet",
            Variant::Push => "push",
            Variant::PushStar => "push_star",
            Variant::Streaming => "streaming",
            Variant::BestEffort => "best_effort",
            Variant::Speculative => "speculative",
            Variant::DynamicRepartition => "dynamic_repartition",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionerKind {
    /// Boundaries from a 1% key sample.
    #[default]
    Range,
    /// Equal-width key ranges, no sampling pass.
    UniformRange,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShuffleConfig {
    /// Map tasks; 0 means one per input partition.
    #[serde(rename = "M")]
    pub m: usize,
    /// Reduce partitions; 0 means one per input partition.
    #[serde(rename = "R")]
    pub r: usize,
    /// Pre-shuffle merge factor.
    #[serde(rename = "F")]
    pub f: usize,
    /// Map tasks per round.
    #[serde(rename = "P")]
    pub p: usize,
    /// 0 means every node of the cluster.
    pub num_nodes: usize,
    pub partitioner: PartitionerKind,
    pub keep_map_outputs: bool,
    /// Merge-phase timeout for best-effort merge; unset waits forever.
    pub merge_timeout_ms: Option<u64>,
    pub speculation: Option<Speculation>,
    pub skew_memory_threshold: Option<u64>,
    /// Simulated compute per map task.
    pub map_work_ms: u64,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig {
            m: 0,
            r: 0,
            f: 4,
            p: 4,
            num_nodes: 0,
            partitioner: PartitionerKind::Range,
            keep_map_outputs: true,
            merge_timeout_ms: None,
            speculation: None,
            skew_memory_threshold: None,
            map_work_ms: 0,
        }
    }
}

impl ShuffleConfig {
    pub fn new(r: usize) -> Self {
        ShuffleConfig {
            r,
            ..Default::default()
        }
    }

    /// Number of reduce partitions for `m` inputs.
    pub fn reducers(&self, m: usize) -> usize {
        if self.r == 0 {
            m
        } else {
            self.r
        }
    }

    pub fn merge_timeout(&self) -> Option<Duration> {
        self.merge_timeout_ms.map(Duration::from_millis)
    }

    pub(crate) fn nodes(&self, rt: &Runtime) -> usize {
        match self.num_nodes {
            0 => rt.num_nodes(),
            n => n.min(rt.num_nodes()),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if m == 0 || self.reducers(m) == 0 || self.f == 0 || self.p == 0 {
            return Err(Error::InvalidArgument(
                "M, R, F and P must all be at least 1".into(),
            ));
        }
        if self.m != 0 && self.m != m {
            return Err(Error::InvalidArgument(format!(
                "config says M={} but {m} inputs were given",
                self.m
            )));
        }
        Ok(())
    }
}

/// Node owning reduce partition `p`: contiguous ranges of partitions per node.
pub fn owner_of(p: usize, r: usize, nodes: usize) -> NodeId {
    p * nodes / r
}

/// Node a map task (and its input) is placed on.
pub fn map_node(i: usize, nodes: usize) -> NodeId {
    i % nodes
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShuffleStats {
    pub variant: Option<Variant>,
    pub m: usize,
    pub r: usize,
    pub map_blocks: u64,
    pub merged_blocks: u64,
    /// Intermediate block objects: map outputs plus merge outputs.
    pub blocks_created: u64,
    /// Blocks the reduce tasks read.
    pub reducer_visible_blocks: u64,
    /// Per partition, the number of blocks its reduce task(s) read.
    pub reducer_inputs: Vec<usize>,
    pub rounds: usize,
    pub merges_cancelled: usize,
    pub duplicates_submitted: usize,
    pub repartition: Option<RepartitionStats>,
}

#[derive(Debug, Clone)]
pub struct ShuffleOutput {
    /// Per partition, sorted runs in no particular order.
    pub partitions: Vec<Vec<ObjectRef>>,
    pub stats: ShuffleStats,
}

impl ShuffleOutput {
    pub fn refs(&self) -> impl Iterator<Item = &ObjectRef> {
        self.partitions.iter().flatten()
    }

    /// Blocks until every output run is sealed.
    pub fn wait(&self, rt: &Runtime) -> Result<()> {
        let refs: Vec<ObjectRef> = self.refs().cloned().collect();
        if !refs.is_empty() {
            rt.wait(&refs, refs.len(), None)?;
        }
        Ok(())
    }

    pub fn release(&self, rt: &Runtime) -> Result<()> {
        rt.drop_refs(self.refs())
    }
}

/// Records of one partition, merging its runs when there are several.
pub fn read_partition(rt: &Runtime, runs: &[ObjectRef]) -> Result<Bytes> {
    let blocks: Vec<Block> = runs
        .iter()
        .map(|r| Ok(Block::decode(&rt.get(r, None)?)?))
        .collect::<Result<_>>()?;
    match blocks.len() {
        0 => Ok(Bytes::new()),
        1 => Ok(blocks[0].data.clone()),
        _ => {
            let merged = record::merge_encoded(blocks[0].partition_id, &blocks)?;
            Ok(merged.slice(record::BLOCK_HEADER..))
        }
    }
}

/// Order-dependent checksum of all output records in partition order.
pub fn output_checksum(rt: &Runtime, out: &ShuffleOutput) -> Result<u64> {
    let mut h = Fnv1a::new();
    for runs in &out.partitions {
        h.write(&read_partition(rt, runs)?);
    }
    Ok(h.finish())
}

/// Checksum a correct sort of `records` must produce.
pub fn oracle_checksum(data: &[u8]) -> u64 {
    let mut recs: Vec<&[u8]> = record::records(data).collect();
    recs.sort_unstable();
    let mut h = Fnv1a::new();
    for r in recs {
        h.write(r);
    }
    h.finish()
}

/// The partitioner `cfg` asks for; range partitioners sample `inputs`.
pub fn build_partitioner(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
) -> Result<Partitioner> {
    let r = cfg.reducers(inputs.len());
    let part = match cfg.partitioner {
        PartitionerKind::Range => {
            Partitioner::range(sample_boundaries(rt, inputs, r, cfg.nodes(rt))?)?
        }
        PartitionerKind::UniformRange => Partitioner::range(uniform_boundaries(r))?,
        PartitionerKind::Hash => Partitioner::Hash { r },
    };
    if part.num_partitions() != r {
        return Err(Error::InvalidArgument(format!(
            "sampled only {} distinct cut points for R={}",
            part.num_partitions() - 1,
            r
        )));
    }
    Ok(part)
}

/// Runs a sorting variant end to end (without blocking on the reduce tasks).
pub fn run_variant(
    rt: &Runtime,
    variant: Variant,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
) -> Result<ShuffleOutput> {
    cfg.validate(inputs.len())?;
    let part = build_partitioner(rt, cfg, inputs)?;
    let mut out = match variant {
        Variant::Simple => simple_shuffle(rt, cfg, inputs, &part)?,
        Variant::Riffle => riffle_shuffle(rt, cfg, inputs, &part)?,
        Variant::Magnet => magnet_shuffle(rt, cfg, inputs, &part)?,
        Variant::Push => push_shuffle_pipelined(
            rt,
            &ShuffleConfig {
                keep_map_outputs: true,
                ..cfg.clone()
            },
            inputs,
            &part,
        )?,
        Variant::PushStar => push_shuffle_pipelined(
            rt,
            &ShuffleConfig {
                keep_map_outputs: false,
                ..cfg.clone()
            },
            inputs,
            &part,
        )?,
        Variant::BestEffort => best_effort_merge(rt, cfg, inputs, &part)?,
        Variant::Speculative => {
            let spec = cfg.speculation.unwrap_or_default();
            variants::speculative_shuffle(rt, cfg, inputs, &part, spec)?
        }
        Variant::DynamicRepartition => {
            let threshold = cfg.skew_memory_threshold.ok_or_else(|| {
                Error::InvalidArgument("dynamic_repartition needs skew_memory_threshold".into())
            })?;
            variants::repartitioned_shuffle(rt, cfg, inputs, &part, threshold)?
        }
        Variant::Streaming => {
            return Err(Error::InvalidArgument(
                "streaming is an aggregation workload, not a sort".into(),
            ));
        }
    };
    out.stats.variant = Some(variant);
    Ok(out)
}
