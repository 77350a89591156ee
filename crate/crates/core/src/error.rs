use thiserror::Error;

use crate::placement::EntryId;

/// A value outside its documented bounds.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed trace header")]
    MalformedHeader { line: usize },
    #[error("line {line}: malformed line")]
    MalformedLine { line: usize },
    #[error("line {line}: step count mismatch (expected {expected} steps, found {found})")]
    StepCountMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: step out of order (expected {expected:?}, found {found:?})")]
    StepOrder {
        line: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("line {line}: future token access (token {token}, limit {limit})")]
    FutureTokenAccess { line: usize, token: u32, limit: u32 },
    #[error("line {line}: access set is empty")]
    EmptyAccessSet { line: usize },
    #[error("line {line}: access set is not strictly ascending")]
    UnsortedAccessSet { line: usize },
    #[error("score stream ended before step ({n}, {l})")]
    ScoreStepMissing { n: u32, l: u32 },
    #[error("score stream out of order (expected {expected:?}, found {found:?})")]
    ScoreOrder { expected: (u32, u32), found: (u32, u32) },
    #[error("score stream has trailing step ({n}, {l})")]
    ScoreTrailing { n: u32, l: u32 },
    #[error("step ({n}, {l}): expected {expected} scores, found {found}")]
    ScoreCount {
        n: u32,
        l: u32,
        expected: usize,
        found: usize,
    },
    #[error("step ({n}, {l}): non-finite score at index {index}")]
    NonFiniteScore { n: u32, l: u32, index: usize },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while running a placement simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible decision at step ({n}, {l}): HBM would hold {resident} bytes of {capacity}")]
    Infeasible {
        n: u32,
        l: u32,
        resident: u64,
        capacity: u64,
    },
    #[error("logic error at step ({n}, {l}): {entry:?} {reason}")]
    Logic {
        n: u32,
        l: u32,
        entry: EntryId,
        reason: &'static str,
    },
    #[error("audit failed: tracked {tracked} HBM KV bytes, recomputed {actual}")]
    Audit { tracked: u64, actual: u64 },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot compare runs with different workloads ({left} vs {right})")]
pub struct FingerprintMismatch {
    pub left: String,
    pub right: String,
}
