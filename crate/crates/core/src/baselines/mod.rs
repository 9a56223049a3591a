//! Reference schemes sharing the engine, simulator and driver with RingAda:
//! a single device training every adapter, and a weight-stashing pipeline
//! over the same ring with every adapter unfrozen.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::ModelParams;
use crate::trainer::{Datasets, RunRecord, Setup, Trainer, TrainerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    RingAda,
    PipeAdapter,
    Single,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [
        SchemeKind::RingAda,
        SchemeKind::PipeAdapter,
        SchemeKind::Single,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::RingAda => "RingAda",
            SchemeKind::PipeAdapter => "PipeAdapter",
            SchemeKind::Single => "Single",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                format!("unknown scheme `{s}` (expected RingAda, PipeAdapter or Single)")
            })
    }
}

/// The ring protocol with scheduled unfreezing.
pub fn run_ringada(
    params: ModelParams,
    data: &Datasets,
    setup: &Setup,
) -> Result<(ModelParams, RunRecord), TrainerError> {
    Trainer::new(SchemeKind::RingAda, params, data, setup)?.run_until_converged()
}

/// Every layer and every sample on one device, all adapters trainable, one
/// batch at a time. Batches are drawn in the same order as the ring schemes.
pub fn run_single(
    params: ModelParams,
    data: &Datasets,
    setup: &Setup,
) -> Result<(ModelParams, RunRecord), TrainerError> {
    Trainer::new(SchemeKind::Single, params, data, setup)?.run_until_converged()
}

/// One-forward-one-backward pipeline over the ring with weight stashing and
/// every adapter trainable; up to one batch per stage in flight.
pub fn run_pipeadapter(
    params: ModelParams,
    data: &Datasets,
    setup: &Setup,
) -> Result<(ModelParams, RunRecord), TrainerError> {
    Trainer::new(SchemeKind::PipeAdapter, params, data, setup)?.run_until_converged()
}

pub fn run_scheme(
    kind: SchemeKind,
    params: ModelParams,
    data: &Datasets,
    setup: &Setup,
) -> Result<(ModelParams, RunRecord), TrainerError> {
    match kind {
        SchemeKind::RingAda => run_ringada(params, data, setup),
        SchemeKind::PipeAdapter => run_pipeadapter(params, data, setup),
        SchemeKind::Single => run_single(params, data, setup),
    }
}
