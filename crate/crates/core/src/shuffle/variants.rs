use std::collections::BTreeSet;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use super::functions::{decode_sample, MAP, MERGE, PARTITIONER_CHUNK, REDUCE, SAMPLE};
use super::partition::{pad_boundaries, quantile_boundaries, Partitioner};
use super::record::Key;
use super::straggler::{speculate_all, Speculation};
use super::{map_node, owner_of, ShuffleConfig, ShuffleOutput, ShuffleStats};
use crate::error::Result;
use crate::ids::NodeId;
use crate::runtime::{Arg, ObjectRef, Runtime, TaskSpec};

/// Roughly 1% of records are sampled for range boundaries.
const SAMPLE_STRIDE: u32 = 100;

/// Boundaries at evenly spaced quantiles of a 1% key sample of `inputs`.
pub fn sample_boundaries(
    rt: &Runtime,
    inputs: &[ObjectRef],
    r: usize,
    nodes: usize,
) -> Result<Vec<Key>> {
    let cuts = quantile_boundaries(sample_keys(rt, inputs, SAMPLE_STRIDE, nodes)?, r);
    if cuts.len() + 1 >= r {
        return Ok(cuts);
    }
    // Too few distinct keys in the sample: look at every key, then pad.
    let cuts = quantile_boundaries(sample_keys(rt, inputs, 1, nodes)?, r);
    Ok(pad_boundaries(cuts, r))
}

fn sample_keys(rt: &Runtime, inputs: &[ObjectRef], stride: u32, nodes: usize) -> Result<Vec<Key>> {
    let mut refs = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let spec = TaskSpec::new(SAMPLE)
            .arg(input)
            .inline(stride.to_le_bytes().to_vec())
            .on_node(map_node(i, nodes))
            .named(format!("sample-{i}"));
        refs.push(rt.submit1(spec)?);
    }
    let mut keys = Vec::new();
    for r in &refs {
        keys.extend(decode_sample(&rt.get(r, None)?));
    }
    rt.drop_refs(&refs)?;
    Ok(keys)
}

pub(crate) fn map_spec(
    cfg: &ShuffleConfig,
    i: usize,
    input: &ObjectRef,
    part: &Bytes,
    r: usize,
    node: NodeId,
) -> TaskSpec {
    TaskSpec::new(MAP)
        .arg(input)
        .inline(cfg.map_work_ms.to_le_bytes().to_vec())
        .args(
            part.chunks(PARTITIONER_CHUNK)
                .map(|c| Arg::Inline(part.slice_ref(c))),
        )
        .returns(r)
        .on_node(node)
        .named(format!("map-{i}"))
}

fn submit_maps(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
    node_of: impl Fn(usize) -> NodeId,
) -> Result<Vec<Vec<ObjectRef>>> {
    let enc = part.encode();
    let r = part.num_partitions();
    inputs
        .iter()
        .enumerate()
        .map(|(i, input)| rt.submit(map_spec(cfg, i, input, &enc, r, node_of(i))))
        .collect()
}

fn submit_reduce(
    rt: &Runtime,
    name: String,
    blocks: &[&ObjectRef],
    node: NodeId,
) -> Result<ObjectRef> {
    rt.submit1(
        TaskSpec::new(REDUCE)
            .args(blocks.iter().copied())
            .on_node(node)
            .named(name)
            .persist(true),
    )
}

fn submit_merge(
    rt: &Runtime,
    name: String,
    k: usize,
    blocks: &[&ObjectRef],
    node: NodeId,
) -> Result<Vec<ObjectRef>> {
    let spec = TaskSpec::new(MERGE)
        .inline((k as u32).to_le_bytes().to_vec())
        .args(blocks.iter().copied())
        .returns(k)
        .on_node(node)
        .named(name)
        .persist(true);
    rt.submit(spec)
}

fn simple_reduces(
    rt: &Runtime,
    maps: &[Vec<ObjectRef>],
    r: usize,
    nodes: usize,
) -> Result<Vec<Vec<ObjectRef>>> {
    (0..r)
        .map(|p| {
            let blocks: Vec<&ObjectRef> = maps.iter().map(|mo| &mo[p]).collect();
            Ok(vec![submit_reduce(
                rt,
                format!("reduce-{p}"),
                &blocks,
                owner_of(p, r, nodes),
            )?])
        })
        .collect()
}

/// M map tasks each return R blocks; R reduce tasks each merge M blocks.
pub fn simple_shuffle(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
) -> Result<ShuffleOutput> {
    let nodes = cfg.nodes(rt);
    let (m, r) = (inputs.len(), part.num_partitions());
    let maps = submit_maps(rt, cfg, inputs, part, |i| map_node(i, nodes))?;
    let partitions = simple_reduces(rt, &maps, r, nodes)?;
    rt.drop_refs(maps.iter().flatten())?;
    Ok(ShuffleOutput {
        partitions,
        stats: simple_stats(m, r),
    })
}

fn simple_stats(m: usize, r: usize) -> ShuffleStats {
    let blocks = (m * r) as u64;
    ShuffleStats {
        m,
        r,
        map_blocks: blocks,
        blocks_created: blocks,
        reducer_visible_blocks: blocks,
        reducer_inputs: vec![m; r],
        ..Default::default()
    }
}

/// Groups of F co-located map tasks; each group's F×R blocks are merged
/// locally into R blocks before the reducers pull them.
pub fn riffle_shuffle(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
) -> Result<ShuffleOutput> {
    let nodes = cfg.nodes(rt);
    let (m, r, f) = (inputs.len(), part.num_partitions(), cfg.f);
    let group_node = |g: usize| g % nodes;
    let maps = submit_maps(rt, cfg, inputs, part, |i| group_node(i / f))?;
    let groups = m.div_ceil(f);
    let mut merged = Vec::with_capacity(groups);
    for g in 0..groups {
        let members = &maps[g * f..((g + 1) * f).min(m)];
        let blocks: Vec<&ObjectRef> = members.iter().flatten().collect();
        merged.push(submit_merge(
            rt,
            format!("merge-{g}"),
            r,
            &blocks,
            group_node(g),
        )?);
    }
    let mut partitions = Vec::with_capacity(r);
    for p in 0..r {
        let blocks: Vec<&ObjectRef> = merged.iter().map(|mo| &mo[p]).collect();
        partitions.push(vec![submit_reduce(
            rt,
            format!("reduce-{p}"),
            &blocks,
            owner_of(p, r, nodes),
        )?]);
    }
    rt.drop_refs(maps.iter().flatten())?;
    rt.drop_refs(merged.iter().flatten())?;
    let visible = (groups * r) as u64;
    let stats = ShuffleStats {
        m,
        r,
        map_blocks: (m * r) as u64,
        merged_blocks: visible,
        blocks_created: (m * r) as u64 + visible,
        reducer_visible_blocks: visible,
        reducer_inputs: vec![groups; r],
        rounds: groups,
        ..Default::default()
    };
    Ok(ShuffleOutput { partitions, stats })
}

#[derive(Clone, Copy)]
struct PushMode {
    /// Block before each merge round until the previous one finished.
    gated: bool,
    keep_map_outputs: bool,
    /// Cancel merges still running after this long and fall back to raw blocks.
    best_effort: Option<Option<std::time::Duration>>,
}

/// Maps run in rounds of P; per round, every node merges the blocks of the
/// partitions it owns; final reducers read only node-local merged blocks.
pub fn magnet_shuffle(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
) -> Result<ShuffleOutput> {
    push_topology(
        rt,
        cfg,
        inputs,
        part,
        PushMode {
            gated: false,
            keep_map_outputs: true,
            best_effort: None,
        },
    )
}

/// Round-pipelined push shuffle: at most one merge round in flight; with
/// `keep_map_outputs == false` each round's map outputs are released as
/// soon as that round's merges are submitted.
pub fn push_shuffle_pipelined(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
) -> Result<ShuffleOutput> {
    let mode = PushMode {
        gated: true,
        keep_map_outputs: cfg.keep_map_outputs,
        best_effort: None,
    };
    push_topology(rt, cfg, inputs, part, mode)
}

/// Push topology whose merges are cancelled once `merge_timeout` passes;
/// reducers of a cancelled merge read the raw map blocks instead.
pub fn best_effort_merge(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
) -> Result<ShuffleOutput> {
    let mode = PushMode {
        gated: false,
        keep_map_outputs: true,
        best_effort: Some(cfg.merge_timeout()),
    };
    push_topology(rt, cfg, inputs, part, mode)
}

fn push_topology(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
    mode: PushMode,
) -> Result<ShuffleOutput> {
    let nodes = cfg.nodes(rt);
    let (m, r) = (inputs.len(), part.num_partitions());
    let enc = part.encode();
    let owned: Vec<Vec<usize>> = (0..nodes)
        .map(|n| (0..r).filter(|&p| owner_of(p, r, nodes) == n).collect())
        .collect();
    let rounds: Vec<std::ops::Range<usize>> = (0..m.div_ceil(cfg.p))
        .map(|k| k * cfg.p..((k + 1) * cfg.p).min(m))
        .collect();

    let mut maps: Vec<Vec<ObjectRef>> = Vec::with_capacity(m);
    // merges[round][node] = outputs, in `owned[node]` order.
    let mut merges: Vec<Vec<Vec<ObjectRef>>> = Vec::with_capacity(rounds.len());
    let mut in_flight: Vec<ObjectRef> = Vec::new();
    let mut released_upto = 0;
    for (k, round) in rounds.iter().enumerate() {
        for i in round.clone() {
            maps.push(rt.submit(map_spec(cfg, i, &inputs[i], &enc, r, map_node(i, nodes)))?);
        }
        if mode.gated && !in_flight.is_empty() {
            rt.wait(&in_flight, in_flight.len(), None)?;
        }
        in_flight.clear();
        let mut per_node = Vec::with_capacity(nodes);
        for (n, parts) in owned.iter().enumerate() {
            if parts.is_empty() {
                per_node.push(Vec::new());
                continue;
            }
            let blocks: Vec<&ObjectRef> = round
                .clone()
                .flat_map(|i| parts.iter().map(move |&p| (i, p)))
                .map(|(i, p)| &maps[i][p])
                .collect();
            let outs = submit_merge(rt, format!("merge-{k}-{n}"), parts.len(), &blocks, n)?;
            in_flight.push(outs[0].clone());
            per_node.push(outs);
        }
        merges.push(per_node);
        if !mode.keep_map_outputs {
            rt.drop_refs(maps[round.clone()].iter().flatten())?;
            released_upto = round.end;
        }
    }

    // (round, node) pairs whose merge was cancelled.
    let mut cancelled = BTreeSet::new();
    if let Some(timeout) = mode.best_effort {
        let firsts: Vec<(usize, usize, ObjectRef)> = merges
            .iter()
            .enumerate()
            .flat_map(|(k, per)| {
                per.iter()
                    .enumerate()
                    .filter(|(_, o)| !o.is_empty())
                    .map(move |(n, o)| (k, n, o[0].clone()))
            })
            .collect();
        let refs: Vec<ObjectRef> = firsts.iter().map(|(_, _, r)| r.clone()).collect();
        let w = rt.wait(&refs, refs.len(), timeout)?;
        for pending in &w.pending {
            if rt.cancel(pending) {
                let (k, n, _) = firsts
                    .iter()
                    .find(|(_, _, r)| r == pending)
                    .expect("pending ref is a merge");
                cancelled.insert((*k, *n));
            }
        }
    }

    let mut partitions = Vec::with_capacity(r);
    let mut reducer_inputs = Vec::with_capacity(r);
    #[allow(clippy::needless_range_loop)]
    for p in 0..r {
        let n = owner_of(p, r, nodes);
        let idx = owned[n]
            .iter()
            .position(|&q| q == p)
            .expect("owner holds partition");
        let mut blocks: Vec<&ObjectRef> = Vec::new();
        for (k, round) in rounds.iter().enumerate() {
            if cancelled.contains(&(k, n)) {
                blocks.extend(round.clone().map(|i| &maps[i][p]));
            } else {
                blocks.push(&merges[k][n][idx]);
            }
        }
        reducer_inputs.push(blocks.len());
        partitions.push(vec![submit_reduce(rt, format!("reduce-{p}"), &blocks, n)?]);
    }
    rt.drop_refs(maps[released_upto..].iter().flatten())?;
    rt.drop_refs(merges.iter().flatten().flatten())?;

    let merged_blocks: u64 = merges
        .iter()
        .enumerate()
        .flat_map(|(k, per)| per.iter().enumerate().map(move |(n, o)| (k, n, o.len())))
        .filter(|(k, n, _)| !cancelled.contains(&(*k, *n)))
        .map(|(_, _, len)| len as u64)
        .sum();
    let stats = ShuffleStats {
        m,
        r,
        map_blocks: (m * r) as u64,
        merged_blocks,
        blocks_created: (m * r) as u64 + merged_blocks,
        reducer_visible_blocks: reducer_inputs.iter().sum::<usize>() as u64,
        reducer_inputs,
        rounds: rounds.len(),
        merges_cancelled: cancelled.len(),
        ..Default::default()
    };
    Ok(ShuffleOutput { partitions, stats })
}

/// Simple shuffle whose map tasks are duplicated when they straggle.
pub(crate) fn speculative_shuffle(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
    spec: Speculation,
) -> Result<ShuffleOutput> {
    let nodes = cfg.nodes(rt);
    let (m, r) = (inputs.len(), part.num_partitions());
    let enc = part.encode();
    let specs = inputs
        .iter()
        .enumerate()
        .map(|(i, input)| map_spec(cfg, i, input, &enc, r, map_node(i, nodes)))
        .collect();
    let (maps, dups) = speculate_all(rt, specs, spec)?;
    let partitions = simple_reduces(rt, &maps, r, nodes)?;
    rt.drop_refs(maps.iter().flatten())?;
    let mut stats = simple_stats(m, r);
    stats.duplicates_submitted = dups;
    Ok(ShuffleOutput { partitions, stats })
}

/// Simple shuffle whose oversized reduce partitions are split recursively.
pub(crate) fn repartitioned_shuffle(
    rt: &Runtime,
    cfg: &ShuffleConfig,
    inputs: &[ObjectRef],
    part: &Partitioner,
    threshold: u64,
) -> Result<ShuffleOutput> {
    let nodes = cfg.nodes(rt);
    let (m, r) = (inputs.len(), part.num_partitions());
    let maps = submit_maps(rt, cfg, inputs, part, |i| map_node(i, nodes))?;
    let per_partition: Vec<Vec<ObjectRef>> = (0..r)
        .map(|p| maps.iter().map(|mo| mo[p].clone()).collect())
        .collect();
    let (partitions, rs) = dynamic_repartition_on(rt, &per_partition, threshold, nodes)?;
    rt.drop_refs(maps.iter().flatten())?;
    let mut stats = simple_stats(m, r);
    stats.reducer_inputs = rs.reducer_inputs.clone();
    stats.repartition = Some(rs);
    Ok(ShuffleOutput { partitions, stats })
}

#[derive(Debug, Clone, PartialEq, Eq, ThisError, Serialize, Deserialize)]
pub enum RepartitionWarning {
    #[error("partition {partition}: single block of {size} bytes exceeds the {threshold}-byte threshold")]
    SingleBlockOverThreshold {
        partition: usize,
        size: u64,
        threshold: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepartitionStats {
    pub threshold: u64,
    pub splits: usize,
    pub max_depth: usize,
    pub reduce_tasks: usize,
    /// Largest input of any reduce task, in bytes.
    pub max_task_input: u64,
    /// Largest input of any reduce task reading more than one block.
    pub max_divisible_task_input: u64,
    /// Per partition, blocks read across all of its reduce tasks.
    pub reducer_inputs: Vec<usize>,
    /// Per partition, total input bytes.
    pub partition_bytes: Vec<u64>,
    pub warnings: Vec<RepartitionWarning>,
}

/// For each partition whose inputs exceed `memory_threshold` bytes, bisects
/// the block list and recurses until every reduce task fits (or holds a
/// single block). Returns, per partition, the sorted runs to merge on read.
pub fn dynamic_repartition(
    rt: &Runtime,
    reduce_inputs: &[Vec<ObjectRef>],
    memory_threshold: u64,
) -> Result<(Vec<Vec<ObjectRef>>, RepartitionStats)> {
    dynamic_repartition_on(rt, reduce_inputs, memory_threshold, rt.num_nodes())
}

fn dynamic_repartition_on(
    rt: &Runtime,
    reduce_inputs: &[Vec<ObjectRef>],
    threshold: u64,
    nodes: usize,
) -> Result<(Vec<Vec<ObjectRef>>, RepartitionStats)> {
    if threshold == 0 {
        return Err(crate::Error::InvalidArgument(
            "memory threshold must be positive".into(),
        ));
    }
    let r = reduce_inputs.len();
    let mut stats = RepartitionStats {
        threshold,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(r);
    for (p, blocks) in reduce_inputs.iter().enumerate() {
        let sizes = rt.sizes(blocks)?;
        let sized: Vec<(&ObjectRef, u64)> = blocks.iter().zip(sizes).collect();
        stats
            .partition_bytes
            .push(sized.iter().map(|(_, s)| s).sum());
        stats.reducer_inputs.push(blocks.len());
        let mut runs = Vec::new();
        split(
            rt,
            p,
            &sized,
            0,
            "",
            owner_of(p, r, nodes),
            &mut stats,
            &mut runs,
        )?;
        out.push(runs);
    }
    Ok((out, stats))
}

#[allow(clippy::too_many_arguments)]
fn split(
    rt: &Runtime,
    p: usize,
    blocks: &[(&ObjectRef, u64)],
    depth: usize,
    path: &str,
    node: NodeId,
    stats: &mut RepartitionStats,
    runs: &mut Vec<ObjectRef>,
) -> Result<()> {
    let total: u64 = blocks.iter().map(|(_, s)| s).sum();
    stats.max_depth = stats.max_depth.max(depth);
    if total <= stats.threshold || blocks.len() == 1 {
        if total > stats.threshold {
            stats
                .warnings
                .push(RepartitionWarning::SingleBlockOverThreshold {
                    partition: p,
                    size: total,
                    threshold: stats.threshold,
                });
        } else if blocks.len() > 1 {
            stats.max_divisible_task_input = stats.max_divisible_task_input.max(total);
        }
        stats.max_task_input = stats.max_task_input.max(total);
        stats.reduce_tasks += 1;
        let refs: Vec<&ObjectRef> = blocks.iter().map(|(r, _)| *r).collect();
        let name = if path.is_empty() {
            format!("reduce-{p}")
        } else {
            format!("reduce-{p}.{path}")
        };
        runs.push(submit_reduce(rt, name, &refs, node)?);
        return Ok(());
    }
    stats.splits += 1;
    // Cut where the running total gets closest to half.
    let mut cum = 0u64;
    let mut cut = 1;
    let mut best = u64::MAX;
    for (i, (_, s)) in blocks.iter().enumerate().take(blocks.len() - 1) {
        cum += s;
        let dist = cum.abs_diff(total - cum);
        if dist < best {
            best = dist;
            cut = i + 1;
        }
    }
    split(
        rt,
        p,
        &blocks[..cut],
        depth + 1,
        &format!("{path}0"),
        node,
        stats,
        runs,
    )?;
    split(
        rt,
        p,
        &blocks[cut..],
        depth + 1,
        &format!("{path}1"),
        node,
        stats,
        runs,
    )
}
