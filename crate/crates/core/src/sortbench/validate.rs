use serde::{Deserialize, Serialize};

use super::gen::RecordDigest;
use crate::shuffle::{Key, KEY_SIZE, RECORD_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationFailed {
    #[error("record {offset} has a smaller key than its predecessor")]
    Unsorted { offset: u64 },
    #[error("expected {expected} records, found {found}")]
    RecordCount { expected: u64, found: u64 },
    #[error("checksum {found:#018x} does not match input checksum {expected:#018x}")]
    Checksum { expected: u64, found: u64 },
    #[error("output is not a whole number of records ({bytes} bytes)")]
    Truncated { bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub sorted: bool,
    /// Global index of the first record whose key is smaller than the previous one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_unsorted: Option<u64>,
    pub record_count_ok: bool,
    pub records: u64,
    pub expected_records: u64,
    pub checksum_ok: bool,
    /// Order-independent checksum of the output records.
    pub checksum: u64,
    pub expected_checksum: u64,
}

impl Validation {
    pub fn passed(&self) -> bool {
        self.sorted && self.record_count_ok && self.checksum_ok
    }

    /// The first failed check, if any.
    pub fn check(&self) -> Result<(), ValidationFailed> {
        if let Some(offset) = self.first_unsorted {
            return Err(ValidationFailed::Unsorted { offset });
        }
        if !self.record_count_ok {
            return Err(ValidationFailed::RecordCount {
                expected: self.expected_records,
                found: self.records,
            });
        }
        if !self.checksum_ok {
            return Err(ValidationFailed::Checksum {
                expected: self.expected_checksum,
                found: self.checksum,
            });
        }
        Ok(())
    }
}

/// Incremental validator fed partitions in output order. Sortedness is
/// checked on keys only; records with equal keys may appear in any order.
#[derive(Debug, Clone)]
pub struct Validator {
    expected: RecordDigest,
    seen: RecordDigest,
    last: Option<Key>,
    first_unsorted: Option<u64>,
    stray_bytes: u64,
}

impl Validator {
    pub fn new(expected: RecordDigest) -> Self {
        Validator {
            expected,
            seen: RecordDigest::default(),
            last: None,
            first_unsorted: None,
            stray_bytes: 0,
        }
    }

    pub fn feed(&mut self, data: &[u8]) {
        self.stray_bytes += (data.len() % RECORD_SIZE) as u64;
        for rec in data.chunks_exact(RECORD_SIZE) {
            let key: Key = rec[..KEY_SIZE].try_into().unwrap();
            if self.first_unsorted.is_none() && self.last.is_some_and(|l| key < l) {
                self.first_unsorted = Some(self.seen.records);
            }
            self.last = Some(key);
            self.seen.add(rec);
        }
    }

    pub fn finish(self) -> Validation {
        Validation {
            sorted: self.first_unsorted.is_none() && self.stray_bytes == 0,
            first_unsorted: self.first_unsorted,
            record_count_ok: self.seen.records == self.expected.records && self.stray_bytes == 0,
            records: self.seen.records,
            expected_records: self.expected.records,
            checksum_ok: self.seen.checksum == self.expected.checksum,
            checksum: self.seen.checksum,
            expected_checksum: self.expected.checksum,
        }
    }
}

/// Validates partitions given in output order against the input digest.
pub fn validate_partitions<'a>(
    parts: impl IntoIterator<Item = &'a [u8]>,
    expected: RecordDigest,
) -> Validation {
    let mut v = Validator::new(expected);
    for p in parts {
        v.feed(p);
    }
    v.finish()
}
