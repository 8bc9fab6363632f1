use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Monotone I/O counters for one node (or summed over all nodes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoMetrics {
    pub bytes_spilled: u64,
    pub bytes_restored: u64,
    pub spill_files_created: u64,
    pub network_bytes: u64,
    pub allocation_queue_peak: u64,
    pub objects_created: u64,
}

impl AddAssign for IoMetrics {
    fn add_assign(&mut self, o: Self) {
        self.bytes_spilled += o.bytes_spilled;
        self.bytes_restored += o.bytes_restored;
        self.spill_files_created += o.spill_files_created;
        self.network_bytes += o.network_bytes;
        self.allocation_queue_peak = self.allocation_queue_peak.max(o.allocation_queue_peak);
        self.objects_created += o.objects_created;
    }
}

impl IoMetrics {
    /// Counter growth since `before`; the queue peak is kept as is.
    pub fn since(&self, before: &IoMetrics) -> IoMetrics {
        IoMetrics {
            bytes_spilled: self.bytes_spilled - before.bytes_spilled,
            bytes_restored: self.bytes_restored - before.bytes_restored,
            spill_files_created: self.spill_files_created - before.spill_files_created,
            network_bytes: self.network_bytes - before.network_bytes,
            allocation_queue_peak: self.allocation_queue_peak,
            objects_created: self.objects_created - before.objects_created,
        }
    }

    pub fn sum<'a>(it: impl IntoIterator<Item = &'a IoMetrics>) -> IoMetrics {
        let mut total = IoMetrics::default();
        for m in it {
            total += *m;
        }
        total
    }
}
