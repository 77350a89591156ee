//! Step-by-step simulation of one policy over one trace.

use crate::error::SimError;
use crate::memory_model::{dram_step_latency, hbm_step_latency, total_latency, MemoryConfig, StepTraffic};
use crate::placement::{CapacityMode, PlacementState};
use crate::policies::{PolicyKind, PolicyRunner};
use crate::trace::DecodeTrace;

/// Traffic and latency of one `(n, l)` step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub n: u32,
    pub l: u32,
    pub traffic: StepTraffic,
    pub hbm_latency: f64,
    pub dram_latency: f64,
    pub latency: f64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub policy: PolicyKind,
    pub steps: Vec<StepRecord>,
    pub total_latency: f64,
}

impl SimulationRun {
    pub fn traffic(&self) -> impl Iterator<Item = &StepTraffic> {
        self.steps.iter().map(|s| &s.traffic)
    }
}

/// Simulates `policy` over `trace`. Each step: the policy decides,
/// migrations and the new write are applied, then the step's reads are
/// charged against the updated placement.
pub fn simulate(trace: &DecodeTrace, cfg: &MemoryConfig, policy: PolicyKind) -> Result<SimulationRun, SimError> {
    policy.validate()?;
    let mode = policy.capacity_mode();
    let mut state = PlacementState::initial(trace.header(), cfg, mode)?;
    let mut runner = PolicyRunner::new(policy, trace);
    let mut steps = Vec::with_capacity(trace.steps().len());

    for access in trace.steps() {
        let decision = runner.decide(&state, access);
        let mut traffic = state.apply_decision(&decision, access.n, access.l)?;
        let reads = state.read_traffic(access)?;
        traffic.hbm_read = reads.hbm_read;
        traffic.dram_read = reads.dram_read;

        if mode == CapacityMode::Enforced && state.hbm_resident_bytes() > cfg.hbm_capacity {
            return Err(SimError::Infeasible {
                n: access.n,
                l: access.l,
                resident: state.hbm_resident_bytes(),
                capacity: cfg.hbm_capacity,
            });
        }

        let hbm_latency = hbm_step_latency(&traffic, cfg);
        let dram_latency = dram_step_latency(&traffic, cfg);
        steps.push(StepRecord {
            n: access.n,
            l: access.l,
            traffic,
            hbm_latency,
            dram_latency,
            latency: hbm_latency.max(dram_latency),
            hits: reads.hits,
            misses: reads.misses,
        });
    }
    state.audit()?;

    let total = total_latency(steps.iter().map(|s| &s.traffic), cfg);
    Ok(SimulationRun {
        policy,
        steps,
        total_latency: total,
    })
}
