//! Reproducible sort-benchmark input.

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checksum::fnv1a64;
use crate::error::{Result, TaskError};
use crate::runtime::{FunctionRegistry, ObjectRef, Runtime, TaskContext, TaskResult, TaskSpec};
use crate::shuffle::{map_node, KEY_SIZE, RECORD_SIZE};

pub const GEN: &str = "sortbench.gen";

/// 32-bit words of keystream per record.
const WORDS_PER_RECORD: u128 = (RECORD_SIZE / 4) as u128;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyDistribution {
    #[default]
    Uniform,
    /// About 90% of records have a first key byte below 26, i.e. land in
    /// roughly a tenth of the key space.
    Skewed,
}

fn skew(rec: &mut [u8], dist: KeyDistribution) {
    if dist == KeyDistribution::Skewed && rec[KEY_SIZE] < 230 {
        rec[0] %= 26;
    }
}

/// Record `index` of `partition`, computed without generating its
/// predecessors.
pub fn gen_record(
    seed: u64,
    partition: u64,
    index: u64,
    dist: KeyDistribution,
) -> [u8; RECORD_SIZE] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(partition);
    rng.set_word_pos(index as u128 * WORDS_PER_RECORD);
    let mut rec = [0u8; RECORD_SIZE];
    rng.fill_bytes(&mut rec);
    skew(&mut rec, dist);
    rec
}

/// All `records` records of `partition`; record i equals `gen_record(.., i, ..)`.
pub fn gen_partition(seed: u64, partition: u64, records: u64, dist: KeyDistribution) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(partition);
    let mut out = vec![0u8; records as usize * RECORD_SIZE];
    rng.fill_bytes(&mut out);
    for rec in out.chunks_exact_mut(RECORD_SIZE) {
        skew(rec, dist);
    }
    out
}

/// Records in partition `i` when `total` records are split `m` ways.
pub fn partition_records(total: u64, m: u64, i: u64) -> u64 {
    (i + 1) * total / m - i * total / m
}

fn gen_fn(_ctx: &TaskContext, args: &[Bytes]) -> TaskResult {
    let a = args
        .first()
        .filter(|a| a.len() == 25)
        .ok_or_else(|| TaskError::new("gen expects one 25-byte argument"))?;
    let u = |i: usize| u64::from_le_bytes(a[i * 8..i * 8 + 8].try_into().unwrap());
    let dist = if a[24] == 1 {
        KeyDistribution::Skewed
    } else {
        KeyDistribution::Uniform
    };
    if u(2) == 0 {
        return Err(TaskError::new("empty partitions cannot be stored"));
    }
    Ok(vec![gen_partition(u(0), u(1), u(2), dist).into()])
}

pub(crate) fn register(reg: &mut FunctionRegistry) {
    reg.register(GEN, gen_fn);
}

pub fn gen_spec(
    seed: u64,
    partition: u64,
    records: u64,
    dist: KeyDistribution,
    node: usize,
) -> TaskSpec {
    let mut a = Vec::with_capacity(25);
    for v in [seed, partition, records] {
        a.extend_from_slice(&v.to_le_bytes());
    }
    a.push(u8::from(dist == KeyDistribution::Skewed));
    // Benchmark input lives on disk, as it would in a real sort.
    TaskSpec::new(GEN)
        .inline(a)
        .on_node(node)
        .named(format!("gen-{partition}"))
        .persist(true)
}

/// Submits one generator task per partition, placed round-robin like the
/// map tasks that will read them. A lost partition is rebuilt by rerunning
/// its generator.
pub fn gen_input(
    rt: &Runtime,
    records: u64,
    m: u64,
    seed: u64,
    dist: KeyDistribution,
    nodes: usize,
) -> Result<Vec<ObjectRef>> {
    (0..m)
        .map(|i| {
            rt.submit1(gen_spec(
                seed,
                i,
                partition_records(records, m, i),
                dist,
                map_node(i as usize, nodes),
            ))
        })
        .collect()
}

/// Order-independent digest of a multiset of records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDigest {
    pub records: u64,
    pub checksum: u64,
}

impl RecordDigest {
    pub fn add(&mut self, data: &[u8]) {
        for rec in data.chunks_exact(RECORD_SIZE) {
            self.records += 1;
            self.checksum = self.checksum.wrapping_add(fnv1a64(rec));
        }
    }

    pub fn of(data: &[u8]) -> Self {
        let mut d = RecordDigest::default();
        d.add(data);
        d
    }
}

/// Digest of the whole input, computed locally without the cluster.
pub fn input_digest(records: u64, m: u64, seed: u64, dist: KeyDistribution) -> RecordDigest {
    let mut d = RecordDigest::default();
    for i in 0..m {
        d.add(&gen_partition(
            seed,
            i,
            partition_records(records, m, i),
            dist,
        ));
    }
    d
}
