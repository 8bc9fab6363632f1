use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("distribution sums to {0}, not 1")]
    Unnormalized(f64),
}

const NORM_TOLERANCE: f64 = 1e-9;

/// `sum p * ln(p / q)`, with `0 * ln(0 / q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    if p.len() != q.len() {
        return Err(StatsError::SupportMismatch(format!(
            "{} bins vs {} bins",
            p.len(),
            q.len()
        )));
    }
    for d in [p, q] {
        if let Some(x) = d.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(StatsError::SupportMismatch(format!(
                "invalid probability {x}"
            )));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > NORM_TOLERANCE {
            return Err(StatsError::Unnormalized(s));
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(StatsError::SupportMismatch(format!(
                "bin {i} has p > 0 but q = 0"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

/// Block counts for a simple shuffle at a given scale, computed without
/// running anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub data_bytes: u64,
    pub partition_bytes: u64,
    pub m: u64,
    pub r: u64,
    /// Intermediate blocks, M x R.
    pub blocks: u64,
    /// Average intermediate block size in bytes.
    pub block_bytes: f64,
}

impl BlockPlan {
    /// One map and one reduce task per partition.
    pub fn simple(data_bytes: u64, partition_bytes: u64) -> Self {
        let m = data_bytes.div_ceil(partition_bytes.max(1));
        Self::with_tasks(data_bytes, partition_bytes, m, m)
    }

    pub fn with_tasks(data_bytes: u64, partition_bytes: u64, m: u64, r: u64) -> Self {
        let blocks = m * r;
        let block_bytes = if blocks == 0 {
            0.0
        } else {
            data_bytes as f64 / blocks as f64
        };
        BlockPlan {
            data_bytes,
            partition_bytes,
            m,
            r,
            blocks,
            block_bytes,
        }
    }

    /// Blocks after merging groups of `f` map outputs, as seen by reducers.
    pub fn merged_blocks(&self, f: u64) -> u64 {
        self.m.div_ceil(f.max(1)) * self.r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_against_uniform() {
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(StatsError::SupportMismatch(_))
        ));
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(StatsError::SupportMismatch(_))
        ));
        assert!(matches!(
            kl_divergence(&[0.5, 0.6], &[0.5, 0.5]),
            Err(StatsError::Unnormalized(_))
        ));
        // q may be zero where p is zero
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn hundred_terabyte_plan() {
        let plan = BlockPlan::simple(100_000_000_000_000, 2_000_000_000);
        assert_eq!(plan.m, 50_000);
        assert_eq!(plan.blocks, 2_500_000_000);
        assert_eq!(plan.block_bytes, 40_000.0);
    }
}
