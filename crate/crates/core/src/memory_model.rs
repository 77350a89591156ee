//! Bandwidth latency model for a two-tier HBM + off-package DRAM system.
//!
//! Every step is bandwidth bound: each tier's latency is its transferred
//! volume divided by the relevant bandwidth, and a step takes as long as the
//! slower tier.

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

pub const TB: f64 = 1e12;
pub const GB: u64 = 1_000_000_000;

/// Bandwidths (bytes/s) and capacities (bytes) of both tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub hbm_bandwidth: f64,
    /// Uni-directional bandwidth of one lane of the full-duplex link.
    pub link_bandwidth: f64,
    pub dram_bandwidth: f64,
    pub hbm_capacity: u64,
    pub dram_capacity: u64,
}

impl Default for MemoryConfig {
    /// 4.9 TB/s HBM of 24 GB, 900 GB/s link, 500 GB/s DRAM of 480 GB.
    fn default() -> Self {
        Self {
            hbm_bandwidth: 4.9 * TB,
            link_bandwidth: 900.0 * GB as f64,
            dram_bandwidth: 500.0 * GB as f64,
            hbm_capacity: 24 * GB,
            dram_capacity: 480 * GB,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        for (name, bw) in [
            ("memory.hbm_bandwidth", self.hbm_bandwidth),
            ("memory.link_bandwidth", self.link_bandwidth),
            ("memory.dram_bandwidth", self.dram_bandwidth),
        ] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(ValidationError::new(name, "must be finite and > 0"));
            }
        }
        if self.hbm_capacity == 0 {
            return Err(ValidationError::new("memory.hbm_capacity", "must be > 0"));
        }
        Ok(())
    }
}

/// Bytes moved during one `(n, l)` step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct StepTraffic {
    pub hbm_read: u64,
    pub hbm_write: u64,
    pub dram_read: u64,
    pub dram_write: u64,
    /// HBM to DRAM.
    pub migrate_out: u64,
    /// DRAM to HBM.
    pub migrate_in: u64,
}

impl StepTraffic {
    pub fn accumulate(&mut self, other: &StepTraffic) {
        self.hbm_read += other.hbm_read;
        self.hbm_write += other.hbm_write;
        self.dram_read += other.dram_read;
        self.dram_write += other.dram_write;
        self.migrate_out += other.migrate_out;
        self.migrate_in += other.migrate_in;
    }
}

/// `(H^r + H^w + M^i + M^o) / B_h`
pub fn hbm_step_latency(t: &StepTraffic, cfg: &MemoryConfig) -> f64 {
    (t.hbm_read + t.hbm_write + t.migrate_in + t.migrate_out) as f64 / cfg.hbm_bandwidth
}

/// `E^r / min(B_k, B_d) + max{(E^w + M^o)/B_k, M^i/B_k, (E^w + M^i + M^o)/B_d}`
///
/// The max terms are the outbound link lane, the inbound link lane and the
/// shared DRAM channel.
pub fn dram_step_latency(t: &StepTraffic, cfg: &MemoryConfig) -> f64 {
    let read = t.dram_read as f64 / cfg.link_bandwidth.min(cfg.dram_bandwidth);
    let outbound = (t.dram_write + t.migrate_out) as f64 / cfg.link_bandwidth;
    let inbound = t.migrate_in as f64 / cfg.link_bandwidth;
    let channel = (t.dram_write + t.migrate_in + t.migrate_out) as f64 / cfg.dram_bandwidth;
    read + outbound.max(inbound).max(channel)
}

pub fn step_latency(t: &StepTraffic, cfg: &MemoryConfig) -> f64 {
    hbm_step_latency(t, cfg).max(dram_step_latency(t, cfg))
}

pub fn total_latency<'a, I>(per_step: I, cfg: &MemoryConfig) -> f64
where
    I: IntoIterator<Item = &'a StepTraffic>,
{
    per_step.into_iter().map(|t| step_latency(t, cfg)).sum()
}

/// HBM occupancy check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityCheck {
    pub feasible: bool,
    /// Fraction of HBM capacity in use.
    pub usage: f64,
}

pub fn check_capacity(hbm_resident_bytes: u64, cfg: &MemoryConfig) -> CapacityCheck {
    CapacityCheck {
        feasible: hbm_resident_bytes <= cfg.hbm_capacity,
        usage: hbm_resident_bytes as f64 / cfg.hbm_capacity as f64,
    }
}
