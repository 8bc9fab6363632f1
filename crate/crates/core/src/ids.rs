use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a simulated node. Node ids are dense, `0..num_nodes`.
pub type NodeId = usize;

/// Identifier of one task submission (stable across retries of that task).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u64);

impl TaskId {
    /// Pseudo-task that owns objects `put` directly by the driver.
    pub const DRIVER: TaskId = TaskId(0);
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// 128-bit object identifier: the producing task in the high half, the
/// return index in the low half. Deterministic for a deterministic driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub u128);

impl ObjectId {
    pub fn new(task: TaskId, index: u64) -> Self {
        ObjectId(((task.0 as u128) << 64) | index as u128)
    }

    pub fn task(self) -> TaskId {
        TaskId((self.0 >> 64) as u64)
    }

    pub fn index(self) -> usize {
        (self.0 as u64) as usize
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        u128::from_str_radix(s, 16).ok().map(ObjectId)
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ObjectId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ObjectId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ObjectId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad object id"))
    }
}
