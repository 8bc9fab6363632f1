use bytes::{BufMut, Bytes, BytesMut};

use super::record::{check_boundaries, range_partition, Key, RecordError, KEY_SIZE};
use crate::checksum::fnv1a64;

/// How records are assigned to reduce partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Partitioner {
    /// `R - 1` strictly increasing cut points.
    Range(Vec<Key>),
    /// FNV-1a of the key, modulo `r`.
    Hash { r: usize },
}

impl Partitioner {
    pub fn range(boundaries: Vec<Key>) -> Result<Self, RecordError> {
        check_boundaries(&boundaries)?;
        Ok(Partitioner::Range(boundaries))
    }

    pub fn num_partitions(&self) -> usize {
        match self {
            Partitioner::Range(b) => b.len() + 1,
            Partitioner::Hash { r } => *r,
        }
    }

    pub fn partition_of(&self, record: &[u8]) -> usize {
        match self {
            Partitioner::Range(b) => range_partition(b, &record[..KEY_SIZE]),
            Partitioner::Hash { r } => (fnv1a64(&record[..KEY_SIZE]) % *r as u64) as usize,
        }
    }

    pub(crate) fn encode(&self) -> Bytes {
        let mut out = BytesMut::new();
        match self {
            Partitioner::Range(b) => {
                out.put_u8(0);
                out.put_u32_le(b.len() as u32);
                for k in b {
                    out.extend_from_slice(k);
                }
            }
            Partitioner::Hash { r } => {
                out.put_u8(1);
                out.put_u32_le(*r as u32);
            }
        }
        out.freeze()
    }

    pub(crate) fn decode(b: &[u8]) -> Result<Self, RecordError> {
        let bad = || RecordError::MalformedBlock("bad partitioner encoding".into());
        if b.len() < 5 {
            return Err(bad());
        }
        let n = u32::from_le_bytes(b[1..5].try_into().unwrap()) as usize;
        match b[0] {
            0 => {
                if b.len() != 5 + n * KEY_SIZE {
                    return Err(bad());
                }
                let keys = b[5..]
                    .chunks_exact(KEY_SIZE)
                    .map(|c| c.try_into().unwrap())
                    .collect();
                Partitioner::range(keys)
            }
            1 if n > 0 => Ok(Partitioner::Hash { r: n }),
            _ => Err(bad()),
        }
    }
}

/// Cut points that split the key space into `r` equal-width ranges.
pub fn uniform_boundaries(r: usize) -> Vec<Key> {
    assert!(r >= 1);
    let step = (1u128 << 64) / r as u128;
    (1..r)
        .map(|j| {
            let mut k = [0u8; KEY_SIZE];
            k[..8].copy_from_slice(&((j as u128 * step) as u64).to_be_bytes());
            k
        })
        .collect()
}

/// Evenly spaced quantiles of a key sample, as `r - 1` cut points.
/// Duplicate quantiles are dropped, so heavily repeated keys can yield fewer
/// cut points; callers that need exactly `r` partitions should check.
pub fn quantile_boundaries(mut sample: Vec<Key>, r: usize) -> Vec<Key> {
    if sample.is_empty() || r <= 1 {
        return Vec::new();
    }
    sample.sort_unstable();
    let n = sample.len();
    let mut out: Vec<Key> = (1..r).map(|j| sample[j * n / r]).collect();
    out.dedup();
    out
}

/// Tops `cuts` up to exactly `r - 1` strictly increasing cut points with
/// equal-width cuts, for inputs with fewer distinct keys than partitions.
/// The extra partitions simply end up empty.
pub fn pad_boundaries(cuts: Vec<Key>, r: usize) -> Vec<Key> {
    let want = r.saturating_sub(1);
    let mut set: std::collections::BTreeSet<Key> = cuts.into_iter().collect();
    for u in uniform_boundaries(r.max(1)) {
        if set.len() >= want {
            break;
        }
        set.insert(u);
    }
    set.into_iter().collect()
}
