//! Discrete-event model of the ring pipeline: event logs, makespans, rule
//! checking and per-device memory peaks.

mod log;
mod memory;
mod schedule;
mod validate;

use thiserror::Error;

use crate::domain::DomainError;

pub use log::{Event, EventLog, Place, Task, TaskKind};
pub use memory::{account_memory, static_weight_bytes, DeviceMemory, MemoryLedger};
pub use schedule::{simulate_iteration, simulate_pipeline, simulate_pipeline_with, PipelinePolicy};
pub use validate::{validate_schedule, Rule, ValidatedLog, Violation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error("event log line {line}: {reason}")]
    Parse { line: usize, reason: String },
}
