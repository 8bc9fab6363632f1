//! Per-node object storage: bounded memory with LRU spill victims, fused
//! spill files and restore bookkeeping.
//!
//! A `NodeStore` is plain data. The runtime serializes access to it and
//! performs the actual disk and network I/O outside its lock.

mod config;
mod metrics;
pub mod spill;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::path::PathBuf;

use bytes::Bytes;

pub use config::StoreConfig;
pub use metrics::IoMetrics;
pub use spill::{SpillAddress, SpillEntry, SpillFile};

use crate::ids::ObjectId;

/// One node's copy of an object.
#[derive(Debug, Clone)]
pub(crate) struct StoredCopy {
    pub mem: Option<Bytes>,
    pub spill: Option<SpillAddress>,
    pub size: u64,
    pub pins: u32,
    pub last_access: u64,
    /// A spill job holds these bytes; not a victim candidate until it lands.
    pub spilling: bool,
    /// Fetched from another node: may be dropped instead of spilled while
    /// the original survives.
    pub secondary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AllocKind {
    TaskReturn,
    ArgFetch,
}

#[derive(Debug)]
pub(crate) struct NodeStore {
    pub limit: u64,
    pub used: u64,
    pub peak_used: u64,
    pub copies: HashMap<ObjectId, StoredCopy>,
    lru: BTreeSet<(u64, ObjectId)>,
    clock: u64,
    pub dir: PathBuf,
    pub next_file: u64,
    pub spills_in_flight: usize,
    /// Allocation tickets, task returns ahead of argument fetches.
    pub alloc_queue: VecDeque<(u64, AllocKind)>,
    pub inflight_fetch: HashSet<ObjectId>,
}

impl NodeStore {
    pub fn new(limit: u64, dir: PathBuf) -> Self {
        NodeStore {
            limit,
            used: 0,
            peak_used: 0,
            copies: HashMap::new(),
            lru: BTreeSet::new(),
            clock: 0,
            dir,
            next_file: 0,
            spills_in_flight: 0,
            alloc_queue: VecDeque::new(),
            inflight_fetch: HashSet::new(),
        }
    }

    pub fn reserve(&mut self, size: u64) {
        self.used += size;
        self.peak_used = self.peak_used.max(self.used);
    }

    pub fn release(&mut self, size: u64) {
        self.used = self.used.saturating_sub(size);
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn has_mem(&self, id: ObjectId) -> bool {
        self.copies.get(&id).is_some_and(|c| c.mem.is_some())
    }

    pub fn has_any(&self, id: ObjectId) -> bool {
        self.copies.contains_key(&id)
    }

    /// Installs in-memory bytes whose allocation was already reserved.
    pub fn insert_mem(&mut self, id: ObjectId, bytes: Bytes) {
        let t = self.tick();
        let size = bytes.len() as u64;
        let c = self.copies.entry(id).or_insert(StoredCopy {
            mem: None,
            spill: None,
            size,
            pins: 0,
            last_access: t,
            spilling: false,
            secondary: false,
        });
        if c.mem.is_some() {
            // Duplicate fetch: keep the resident bytes, hand back the reservation.
            self.used = self.used.saturating_sub(size);
            return;
        }
        self.lru.remove(&(c.last_access, id));
        c.mem = Some(bytes);
        c.last_access = t;
        self.lru.insert((t, id));
    }

    /// Installs a copy fetched from another node.
    pub fn insert_secondary(&mut self, id: ObjectId, bytes: Bytes) {
        let fresh = !self.copies.contains_key(&id);
        self.insert_mem(id, bytes);
        if fresh {
            if let Some(c) = self.copies.get_mut(&id) {
                c.secondary = true;
            }
        }
    }

    /// Secondary, memory-only copies that nothing is using.
    pub fn idle_secondaries(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.copies
            .iter()
            .filter(|(_, c)| {
                c.secondary && c.spill.is_none() && c.pins == 0 && !c.spilling && c.mem.is_some()
            })
            .map(|(id, _)| *id)
    }

    pub fn insert_spilled(&mut self, id: ObjectId, size: u64, addr: SpillAddress) {
        let t = self.tick();
        let c = self.copies.entry(id).or_insert(StoredCopy {
            mem: None,
            spill: None,
            size,
            pins: 0,
            last_access: t,
            spilling: false,
            secondary: false,
        });
        c.spill = Some(addr);
    }

    pub fn touch(&mut self, id: ObjectId) -> Option<Bytes> {
        let t = self.tick();
        let c = self.copies.get_mut(&id)?;
        let bytes = c.mem.clone()?;
        self.lru.remove(&(c.last_access, id));
        c.last_access = t;
        self.lru.insert((t, id));
        Some(bytes)
    }

    pub fn pin(&mut self, id: ObjectId) -> Option<Bytes> {
        let bytes = self.touch(id)?;
        if let Some(c) = self.copies.get_mut(&id) {
            c.pins += 1;
        }
        Some(bytes)
    }

    pub fn unpin(&mut self, id: ObjectId) {
        if let Some(c) = self.copies.get_mut(&id) {
            c.pins = c.pins.saturating_sub(1);
        }
    }

    /// Drops the in-memory bytes of a copy that also lives on disk.
    pub fn drop_mem(&mut self, id: ObjectId) -> bool {
        let Some(c) = self.copies.get_mut(&id) else {
            return false;
        };
        if c.mem.take().is_some() {
            self.lru.remove(&(c.last_access, id));
            self.used = self.used.saturating_sub(c.size);
            true
        } else {
            false
        }
    }

    /// Removes every trace of the object from this node. Returns true if
    /// in-memory bytes were released.
    pub fn remove(&mut self, id: ObjectId) -> bool {
        match self.copies.remove(&id) {
            Some(c) if c.mem.is_some() => {
                self.lru.remove(&(c.last_access, id));
                self.used = self.used.saturating_sub(c.size);
                true
            }
            _ => false,
        }
    }

    /// Forgets a spilled copy whose file turned out to be unreadable.
    pub fn forget_spill(&mut self, id: ObjectId) {
        let drop_entry = match self.copies.get_mut(&id) {
            Some(c) => {
                c.spill = None;
                c.mem.is_none()
            }
            None => false,
        };
        if drop_entry {
            self.copies.remove(&id);
        }
    }

    /// Evicts clean (already on disk) objects and the `droppable` secondary
    /// copies, unpinned and in LRU order, until `needed` bytes were freed.
    /// Returns the evicted ids.
    pub fn evict_clean(&mut self, needed: u64, droppable: &HashSet<ObjectId>) -> Vec<ObjectId> {
        let mut freed = 0;
        let mut out = Vec::new();
        let candidates: Vec<ObjectId> = self
            .lru
            .iter()
            .map(|&(_, id)| id)
            .filter(|id| {
                let c = &self.copies[id];
                c.pins == 0 && !c.spilling && (c.spill.is_some() || droppable.contains(id))
            })
            .collect();
        for id in candidates {
            if freed >= needed {
                break;
            }
            let c = &self.copies[&id];
            let size = c.size;
            let released = if c.spill.is_some() {
                self.drop_mem(id)
            } else {
                self.remove(id)
            };
            if released {
                freed += size;
                out.push(id);
            }
        }
        out
    }

    /// Picks unpinned in-memory objects without a disk copy, oldest first,
    /// until `target` bytes are covered, and marks them as spilling.
    pub fn take_dirty_victims(&mut self, target: u64) -> Vec<(ObjectId, Bytes)> {
        let mut acc = 0;
        let mut out = Vec::new();
        for &(_, id) in &self.lru {
            if acc >= target {
                break;
            }
            let c = &self.copies[&id];
            if c.pins == 0 && !c.spilling && c.spill.is_none() {
                if let Some(m) = &c.mem {
                    acc += c.size;
                    out.push((id, m.clone()));
                }
            }
        }
        for (id, _) in &out {
            if let Some(c) = self.copies.get_mut(id) {
                c.spilling = true;
            }
        }
        out
    }
}
