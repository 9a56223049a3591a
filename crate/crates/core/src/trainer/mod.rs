//! Round-based training driver: rotating initiators, head handoff, scheduled
//! unfreezing and convergence checks, with the simulator billing the clock.

mod data;
mod driver;
mod pipeline;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::SchemeKind;
use crate::domain::{
    Cluster, CostModel, DeviceId, DomainError, LMSpec, LayerAssignment, UnfreezeSchedule,
};
use crate::engine::{
    full_backward_reference, full_forward, loss_and_head_grad, Activation, Batch, EngineError,
    FreezeMask, HeadParams, InitOptions, ModelParams,
};
use crate::sim::{EventLog, MemoryLedger, SimError};

pub use data::{
    BatchSampler, BatchStream, ClientDataset, DataConfig, Datasets, OwnedBatch, ToyTask,
};
pub use driver::{evaluate, Trainer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("training diverged: non-finite loss in round {round}")]
    NonFiniteLoss { round: usize },
    #[error("simulated schedule broke {count} rule(s), first: {first}")]
    Schedule { count: usize, first: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no dataset for device {0}")]
    MissingData(DeviceId),
    #[error("head handoff from {0} to itself")]
    SelfHandoff(DeviceId),
}

/// Moving-average plateau test over reported losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceRule {
    pub window: usize,
    /// Relative improvement below which training counts as converged;
    /// infinity stops after the first check.
    pub threshold: f64,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            window: 20,
            threshold: 1e-3,
        }
    }
}

impl ConvergenceRule {
    /// Compares the mean of the last `window` reports with the mean of the
    /// `window` before them. Needs `2 * window` reports.
    pub fn converged(&self, reports: &[f64]) -> bool {
        if self.threshold == f64::INFINITY {
            return true;
        }
        let w = self.window;
        if w == 0 || reports.len() < 2 * w {
            return false;
        }
        let n = reports.len();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let last = mean(&reports[n - w..]);
        let prev = mean(&reports[n - 2 * w..n - w]);
        let rel = (prev - last) / prev.abs().max(f64::MIN_POSITIVE);
        rel.abs() < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: UnfreezeSchedule,
    #[serde(default)]
    pub convergence: ConvergenceRule,
    pub max_rounds: usize,
    pub seed: u64,
    /// First initiator of every round; the smallest device id when absent.
    #[serde(default)]
    pub first_initiator: Option<DeviceId>,
}

impl TrainingConfig {
    pub fn validate(&self, num_layers: usize) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::InvalidConfig(m.into()));
        if self.local_iterations == 0 {
            return bad("local_iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        if self.convergence.window == 0
            || self.convergence.threshold.is_nan()
            || self.convergence.threshold < 0.0
        {
            return bad("convergence window must be positive and threshold non-negative");
        }
        self.schedule.validate(num_layers)?;
        Ok(())
    }
}

/// Everything a scheme run needs besides the initial parameters and data.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: LMSpec,
    pub activation: Activation,
    pub init: InitOptions,
    pub cluster: Cluster,
    pub assignment: LayerAssignment,
    pub cost: CostModel,
    pub training: TrainingConfig,
    /// Device hosting the single-device baseline; smallest id when absent.
    pub single_device: Option<DeviceId>,
    /// Keep the full event log in the run record.
    pub record_events: bool,
}

impl Setup {
    pub fn initial_params(&self) -> Result<ModelParams, TrainerError> {
        Ok(ModelParams::init(
            &self.spec,
            self.activation,
            &self.init,
            self.training.seed,
        )?)
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        self.spec.validate()?;
        self.cost.validate()?;
        self.training.validate(self.spec.num_layers)?;
        if self.assignment.num_layers() != self.spec.num_layers {
            return Err(TrainerError::InvalidConfig(format!(
                "assignment covers {} layers, model has {}",
                self.assignment.num_layers(),
                self.spec.num_layers
            )));
        }
        for d in self.assignment.devices() {
            self.cluster.profile(d)?;
        }
        if let Some(d) = self.training.first_initiator {
            self.cluster.profile(d)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub round: usize,
    pub initiator: DeviceId,
    pub batch_id: u64,
    pub depth: usize,
    pub loss: f64,
    /// Training accuracy on this batch.
    pub accuracy: f64,
    /// Simulated seconds at which the batch's last task finished.
    pub clock: f64,
}

/// Loss reported to the coordinator after one initiator's turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnReport {
    pub round: usize,
    pub initiator: DeviceId,
    pub loss: f64,
    pub clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scheme: SchemeKind,
    pub iterations: Vec<IterationRecord>,
    pub reports: Vec<TurnReport>,
    pub rounds_completed: usize,
    pub converged: bool,
    /// Rounds until the convergence rule fired, or all rounds run.
    pub epochs_to_convergence: usize,
    pub convergence_time_s: f64,
    pub handoff_seconds: f64,
    pub final_accuracy: f64,
    pub final_eval_loss: f64,
    pub memory: MemoryLedger,
    pub events: Option<EventLog>,
}

impl RunRecord {
    /// Mean training loss of each completed round.
    pub fn loss_per_epoch(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for it in &self.iterations {
            let e = sums.entry(it.round).or_default();
            e.0 += it.loss;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// Peer of `current` with the fastest outgoing link; ties go to the smallest id.
pub fn pick_next_initiator(
    current: DeviceId,
    remaining: &[DeviceId],
    cluster: &Cluster,
) -> Result<DeviceId, TrainerError> {
    let mut best: Option<(DeviceId, f64)> = None;
    let mut sorted = remaining.to_vec();
    sorted.sort();
    for u in sorted {
        let rate = if u == current {
            f64::INFINITY
        } else {
            cluster.rate(current, u)?
        };
        if best.is_none_or(|(_, r)| rate > r) {
            best = Some((u, rate));
        }
    }
    best.map(|(u, _)| u)
        .ok_or_else(|| TrainerError::InvalidConfig("no remaining initiator".into()))
}

/// Initiator order of one round: `first`, then repeatedly the best-connected
/// remaining peer of the previous initiator.
pub fn initiator_order(cluster: &Cluster, first: DeviceId) -> Result<Vec<DeviceId>, TrainerError> {
    cluster.profile(first)?;
    let mut remaining: Vec<DeviceId> = cluster.ids().into_iter().filter(|&u| u != first).collect();
    let mut order = vec![first];
    while !remaining.is_empty() {
        let next = pick_next_initiator(*order.last().expect("non-empty"), &remaining, cluster)?;
        remaining.retain(|&u| u != next);
        order.push(next);
    }
    Ok(order)
}

/// Copy the head replica of `from` onto `to`; returns the transfer time.
pub fn handoff_head(
    from: DeviceId,
    to: DeviceId,
    heads: &mut BTreeMap<DeviceId, HeadParams>,
    cluster: &Cluster,
    cost: &CostModel,
) -> Result<f64, TrainerError> {
    if from == to {
        return Err(TrainerError::SelfHandoff(from));
    }
    let rate = cluster.rate(from, to)?;
    let head = heads
        .get(&from)
        .ok_or(DomainError::UnknownDevice(from))?
        .clone();
    heads.insert(to, head);
    Ok(cost.head_params_bytes as f64 / rate)
}

/// One step of plain adapter fine-tuning without any ring: full backward
/// through every block, gradients masked to the trainable set afterwards.
pub fn centralized_step(
    params: &mut ModelParams,
    batch: &Batch,
    depth: usize,
    lr: f64,
) -> Result<f64, TrainerError> {
    let l = params.num_layers();
    let mask = FreezeMask::new(l, depth)?;
    let (logits, cache) = full_forward(params, batch, l)?;
    let loss = loss_and_head_grad(params, &cache, &logits, &batch.labels)?;
    let grads = full_backward_reference(&cache, &loss, params)?.restrict(&mask);
    params.apply_update(&grads, lr, &mask)?;
    Ok(loss.loss)
}
