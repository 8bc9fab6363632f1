use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// In-memory capacity of each node's store, in bytes.
    pub memory_limit: u64,
    /// Minimum size of a fused spill file. Zero disables fusing: every
    /// spilled object gets its own file.
    pub fuse_threshold: u64,
    /// Root directory for spill files; a temporary directory when unset.
    pub spill_dir: Option<PathBuf>,
    /// Simulated latency added to every restore and pull, in microseconds.
    pub fetch_latency_us: u64,
    pub prefetch_enabled: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            memory_limit: 256 << 20,
            fuse_threshold: 1 << 20,
            spill_dir: None,
            fetch_latency_us: 0,
            prefetch_enabled: true,
        }
    }
}

impl StoreConfig {
    pub fn fetch_latency(&self) -> Duration {
        Duration::from_micros(self.fetch_latency_us)
    }

    pub fn fusing(&self) -> bool {
        self.fuse_threshold > 0
    }
}
