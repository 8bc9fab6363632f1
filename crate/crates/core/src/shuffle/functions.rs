//! Task bodies shared by all shuffle variants.

use std::time::Duration;

use bytes::Bytes;

use super::partition::Partitioner;
use super::record::{self, check_records, records, Block, RecordError, KEY_SIZE};
use crate::error::TaskError;
use crate::runtime::{FunctionRegistry, TaskContext, TaskResult};

pub const MAP: &str = "shuffle.map";
pub const MERGE: &str = "shuffle.merge";
pub const REDUCE: &str = "shuffle.reduce";
pub const SAMPLE: &str = "shuffle.sample";
pub const FOLD: &str = "shuffle.fold";

pub fn register(reg: &mut FunctionRegistry) {
    reg.register(MAP, map_fn);
    reg.register(MERGE, merge_fn);
    reg.register(REDUCE, reduce_fn);
    reg.register(SAMPLE, sample_fn);
    reg.register(FOLD, fold_fn);
    super::streaming::register(reg);
}

fn u32_arg(b: &[u8]) -> Result<u32, TaskError> {
    Ok(u32::from_le_bytes(
        b.get(..4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| TaskError::new("bad u32 argument"))?,
    ))
}

fn u64_arg(b: &[u8]) -> Result<u64, TaskError> {
    Ok(u64::from_le_bytes(
        b.get(..8)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| TaskError::new("bad u64 argument"))?,
    ))
}

/// Simulated compute time, interrupted by cancellation.
pub(crate) fn simulate_work(ctx: &TaskContext, ms: u64) -> Result<(), TaskError> {
    if ms > 0 && !ctx.sleep(Duration::from_millis(ms)) {
        return Err(TaskError::new("stopped"));
    }
    Ok(())
}

/// Partitioners larger than the inline limit travel as several inline chunks.
pub(crate) const PARTITIONER_CHUNK: usize = 1024;

/// args: records, simulated work in ms, then the encoded partitioner in one
/// or more chunks.
fn map_fn(ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let [data, work, chunks @ ..] = args else {
        return Err(TaskError::new("map expects at least 3 arguments"));
    };
    simulate_work(ctx, u64_arg(work)?)?;
    let part = match chunks {
        [one] => Partitioner::decode(one)?,
        _ => Partitioner::decode(&chunks.concat())?,
    };
    let blocks = match &part {
        Partitioner::Range(b) => record::sort_and_partition_encoded(data, b)?,
        p => record::partition_by_encoded(data, p.num_partitions(), |r| p.partition_of(r))?,
    };
    Ok(blocks)
}

/// Merges `n` encoded blocks given map-major (`input i*k + j` feeds output
/// `j`) into `k` outputs.
pub(crate) fn merge_groups(k: usize, inputs: &[Bytes]) -> Result<Vec<Bytes>, TaskError> {
    if k == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(k) {
        return Err(TaskError::new(format!(
            "cannot merge {} blocks into {k} outputs",
            inputs.len()
        )));
    }
    let blocks: Vec<Block> = inputs.iter().map(Block::decode).collect::<Result<_, _>>()?;
    let per = blocks.len() / k;
    (0..k)
        .map(|j| {
            let group: Vec<Block> = (0..per).map(|i| blocks[i * k + j].clone()).collect();
            Ok(record::merge_encoded(group[0].partition_id, &group)?)
        })
        .collect()
}

/// args: k (u32), then blocks.
fn merge_fn(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let (k, blocks) = args
        .split_first()
        .ok_or_else(|| TaskError::new("merge needs arguments"))?;
    merge_groups(u32_arg(k)? as usize, blocks)
}

/// args: blocks of one partition.
fn reduce_fn(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    merge_groups(1, args)
}

/// args: running sorted state (empty at first), then new blocks of the
/// same partition. Returns the merged state.
fn fold_fn(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let inputs: Vec<Bytes> = args.iter().filter(|a| !a.is_empty()).cloned().collect();
    merge_groups(1, &inputs)
}

/// args: records, stride (u32). Returns every stride-th key.
fn sample_fn(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let [data, stride] = args else {
        return Err(TaskError::new("sample expects 2 arguments"));
    };
    check_records(data)?;
    let stride = u32_arg(stride)?.max(1) as usize;
    let mut out = Vec::new();
    for r in records(data).step_by(stride) {
        out.extend_from_slice(&r[..KEY_SIZE]);
    }
    if out.is_empty() {
        // Stored values cannot be empty; a lone marker byte means "no keys".
        out.push(0);
    }
    Ok(vec![out.into()])
}

pub(crate) fn decode_sample(b: &[u8]) -> Vec<record::Key> {
    if !b.len().is_multiple_of(KEY_SIZE) {
        return Vec::new();
    }
    b.chunks_exact(KEY_SIZE)
        .map(|c| c.try_into().unwrap())
        .collect()
}

impl From<RecordError> for crate::error::Error {
    fn from(e: RecordError) -> Self {
        crate::error::Error::InvalidArgument(e.to_string())
    }
}
