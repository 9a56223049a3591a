//! Experiment runner for the ring-pipelined adapter fine-tuning simulator:
//! configuration loading, layer planning, scheme runs and the self-check suite.

pub mod check;
pub mod config;
pub mod plan;
pub mod run;

pub use check::{self_check, CheckOutcome, CheckReport};
pub use config::{ConfigError, ExperimentConfig, Resolved};
pub use plan::{plan_assignment, proportional_sizes, PlanError};
pub use run::{
    run_experiment, run_schemes, write_outputs, Experiment, RunError, SchemeSummary, Summary,
};
