//! Fixed-width records and sorted blocks.
//!
//! A record is 100 bytes whose first 10 bytes are the key. Records compare
//! lexicographically over all 100 bytes, so equal keys still have a single
//! well-defined order and every variant produces byte-identical output.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

pub const RECORD_SIZE: usize = 100;
pub const KEY_SIZE: usize = 10;
/// partition id (u32 LE) followed by record count (u32 LE).
pub const BLOCK_HEADER: usize = 8;

pub type Key = [u8; KEY_SIZE];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("{len} bytes is not a whole number of {RECORD_SIZE}-byte records")]
    MalformedRecord { len: usize },
    #[error("malformed block: {0}")]
    MalformedBlock(String),
    #[error("block for partition {found} cannot merge into partition {expected}")]
    PartitionMismatch { expected: u32, found: u32 },
    #[error("invalid boundaries: {0}")]
    InvalidBoundaries(String),
}

pub fn key_of(record: &[u8]) -> Key {
    record[..KEY_SIZE]
        .try_into()
        .expect("record shorter than a key")
}

/// Checks that `data` is a whole number of records.
pub fn check_records(data: &[u8]) -> Result<usize, RecordError> {
    if !data.len().is_multiple_of(RECORD_SIZE) {
        return Err(RecordError::MalformedRecord { len: data.len() });
    }
    Ok(data.len() / RECORD_SIZE)
}

pub fn records(data: &[u8]) -> std::slice::ChunksExact<'_, u8> {
    data.chunks_exact(RECORD_SIZE)
}

/// A sorted run of records destined for one reduce partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub partition_id: u32,
    /// Concatenated records, without the header.
    pub data: Bytes,
}

impl Block {
    pub fn new(partition_id: u32, data: Bytes) -> Result<Self, RecordError> {
        check_records(&data)?;
        Ok(Block { partition_id, data })
    }

    pub fn empty(partition_id: u32) -> Self {
        Block {
            partition_id,
            data: Bytes::new(),
        }
    }

    pub fn record_count(&self) -> usize {
        self.data.len() / RECORD_SIZE
    }

    pub fn records(&self) -> std::slice::ChunksExact<'_, u8> {
        records(&self.data)
    }

    pub fn is_sorted(&self) -> bool {
        let mut prev: Option<&[u8]> = None;
        for r in self.records() {
            if prev.is_some_and(|p| p > r) {
                return false;
            }
            prev = Some(r);
        }
        true
    }

    pub fn encoded_len(&self) -> usize {
        BLOCK_HEADER + self.data.len()
    }

    pub fn encode(&self) -> Bytes {
        let mut out = BytesMut::with_capacity(self.encoded_len());
        out.put_u32_le(self.partition_id);
        out.put_u32_le(self.record_count() as u32);
        out.extend_from_slice(&self.data);
        out.freeze()
    }

    /// Zero-copy decode of an encoded block.
    pub fn decode(bytes: &Bytes) -> Result<Self, RecordError> {
        if bytes.len() < BLOCK_HEADER {
            return Err(RecordError::MalformedBlock(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let pid = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let data = bytes.slice(BLOCK_HEADER..);
        let n = check_records(&data)?;
        if n != count {
            return Err(RecordError::MalformedBlock(format!(
                "header says {count} records, payload holds {n}"
            )));
        }
        Ok(Block {
            partition_id: pid,
            data,
        })
    }
}

/// Builds an encoded block in place, avoiding a second copy.
pub(crate) struct BlockWriter {
    buf: BytesMut,
    count: u32,
}

impl BlockWriter {
    pub fn new(partition_id: u32, capacity_records: usize) -> Self {
        let mut buf = BytesMut::with_capacity(BLOCK_HEADER + capacity_records * RECORD_SIZE);
        buf.put_u32_le(partition_id);
        buf.put_u32_le(0);
        BlockWriter { buf, count: 0 }
    }

    pub fn push(&mut self, record: &[u8]) {
        self.buf.extend_from_slice(record);
        self.count += 1;
    }

    pub fn finish(mut self) -> Bytes {
        self.buf[4..8].copy_from_slice(&self.count.to_le_bytes());
        self.buf.freeze()
    }
}

pub fn check_boundaries(boundaries: &[Key]) -> Result<(), RecordError> {
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RecordError::InvalidBoundaries(
            "cut points must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Index of the range partition holding `key`: the number of boundaries ≤ key.
pub fn range_partition(boundaries: &[Key], key: &[u8]) -> usize {
    boundaries.partition_point(|b| b.as_slice() <= key)
}

fn sorted_refs(data: &[u8]) -> Vec<&[u8]> {
    let mut v: Vec<&[u8]> = records(data).collect();
    v.sort_unstable();
    v
}

/// Sorts `data` and cuts it into `boundaries.len() + 1` encoded blocks, block
/// i holding the keys in `[boundaries[i-1], boundaries[i])`.
pub fn sort_and_partition_encoded(
    data: &[u8],
    boundaries: &[Key],
) -> Result<Vec<Bytes>, RecordError> {
    check_records(data)?;
    check_boundaries(boundaries)?;
    let sorted = sorted_refs(data);
    let r = boundaries.len() + 1;
    let mut out = Vec::with_capacity(r);
    let mut start = 0;
    for p in 0..r {
        let end = match boundaries.get(p) {
            Some(b) => {
                start + sorted[start..].partition_point(|rec| &rec[..KEY_SIZE] < b.as_slice())
            }
            None => sorted.len(),
        };
        let mut w = BlockWriter::new(p as u32, end - start);
        for rec in &sorted[start..end] {
            w.push(rec);
        }
        out.push(w.finish());
        start = end;
    }
    Ok(out)
}

pub fn sort_and_partition(data: &[u8], boundaries: &[Key]) -> Result<Vec<Block>, RecordError> {
    sort_and_partition_encoded(data, boundaries)?
        .iter()
        .map(Block::decode)
        .collect()
}

/// Partitions by an arbitrary classifier, then sorts each block.
pub fn partition_by_encoded(
    data: &[u8],
    r: usize,
    classify: impl Fn(&[u8]) -> usize,
) -> Result<Vec<Bytes>, RecordError> {
    check_records(data)?;
    let mut parts: Vec<Vec<&[u8]>> = vec![Vec::new(); r];
    for rec in records(data) {
        parts[classify(rec) % r].push(rec);
    }
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(p, mut recs)| {
            recs.sort_unstable();
            let mut w = BlockWriter::new(p as u32, recs.len());
            for rec in recs {
                w.push(rec);
            }
            w.finish()
        })
        .collect())
}

/// Streaming k-way merge over sorted record runs.
pub struct MergeIter<'a> {
    runs: Vec<&'a [u8]>,
    pos: Vec<usize>,
    heap: BinaryHeap<Reverse<(&'a [u8], usize)>>,
}

impl<'a> MergeIter<'a> {
    pub fn new(runs: Vec<&'a [u8]>) -> Self {
        let mut heap = BinaryHeap::with_capacity(runs.len());
        for (i, r) in runs.iter().enumerate() {
            if r.len() >= RECORD_SIZE {
                heap.push(Reverse((&r[..RECORD_SIZE], i)));
            }
        }
        let pos = vec![RECORD_SIZE; runs.len()];
        MergeIter { runs, pos, heap }
    }
}

impl<'a> Iterator for MergeIter<'a> {
    type Item = &'a [u8];

    fn next(&mut self) -> Option<&'a [u8]> {
        let Reverse((rec, i)) = self.heap.pop()?;
        let p = self.pos[i];
        let run = self.runs[i];
        if p + RECORD_SIZE <= run.len() {
            self.heap.push(Reverse((&run[p..p + RECORD_SIZE], i)));
            self.pos[i] = p + RECORD_SIZE;
        }
        Some(rec)
    }
}

/// Merges sorted blocks of one partition into a single encoded block.
pub fn merge_encoded(partition_id: u32, blocks: &[Block]) -> Result<Bytes, RecordError> {
    for b in blocks {
        if b.partition_id != partition_id {
            return Err(RecordError::PartitionMismatch {
                expected: partition_id,
                found: b.partition_id,
            });
        }
    }
    let total: usize = blocks.iter().map(Block::record_count).sum();
    let mut w = BlockWriter::new(partition_id, total);
    if blocks.len() == 1 {
        for rec in blocks[0].records() {
            w.push(rec);
        }
    } else {
        for rec in MergeIter::new(blocks.iter().map(|b| &b.data[..]).collect()) {
            w.push(rec);
        }
    }
    Ok(w.finish())
}

/// k-way merge of blocks that must all belong to the same partition.
pub fn merge_sorted(blocks: &[Block]) -> Result<Block, RecordError> {
    let Some(first) = blocks.first() else {
        return Err(RecordError::MalformedBlock("nothing to merge".into()));
    };
    Block::decode(&merge_encoded(first.partition_id, blocks)?)
}

pub fn compare_records(a: &[u8], b: &[u8]) -> Ordering {
    a.cmp(b)
}
