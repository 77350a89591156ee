//! Trace-driven simulation of LLM decode-stage KV-cache placement across a
//! two-tier memory system: bandwidth-rich but small HBM, and large
//! off-package DRAM reached over a full-duplex link.
//!
//! The pieces, bottom up:
//!
//! - [`trace`]: per-step KV access sets (synthetic, converted, or loaded).
//! - [`memory_model`]: bandwidth latency of one step and of a whole run.
//! - [`placement`]: where each entry lives; applies migrations under the
//!   HBM capacity limit.
//! - [`policies`]: unlimited-HBM, static, reactive LRU, page-granularity
//!   and lookahead placement.
//! - [`simulator`]: runs a policy over a trace.
//! - [`sa`]: simulated-annealing search over the lookahead policy's knobs.
//! - [`metrics`]: tokens/s, hit rate, normalization, report I/O.
//! - [`experiment`]: config-driven runs and sensitivity sweeps.

pub mod error;
pub mod experiment;
pub mod memory_model;
pub mod metrics;
pub mod placement;
pub mod policies;
pub mod sa;
pub mod simulator;
pub mod trace;

pub use error::{SimError, TraceError, ValidationError};
pub use memory_model::{MemoryConfig, StepTraffic};
pub use placement::{EntryId, PlacementState, ScheduleDecision, Tier};
pub use policies::PolicyKind;
pub use simulator::{simulate, SimulationRun};
pub use trace::{DecodeTrace, StepAccess, SynthTraceSpec, TraceHeader};
