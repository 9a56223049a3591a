use std::collections::BTreeMap;

use crate::baselines::SchemeKind;
use crate::domain::{DeviceId, LayerAssignment, RoundState, UnfreezeSchedule};
use crate::engine::{
    backward_early_stop, full_forward, loss_and_head_grad, FreezeMask, HeadParams, ModelParams,
};
use crate::sim::{
    account_memory, simulate_pipeline_with, Event, EventLog, MemoryLedger, PipelinePolicy, Place,
    Task, TaskKind, ValidatedLog,
};

use super::{
    handoff_head, initiator_order, pipeline, BatchStream, Datasets, IterationRecord, OwnedBatch,
    RunRecord, Setup, TrainerError, TurnReport,
};

/// Mutable state of one scheme run.
pub struct Trainer<'a> {
    setup: &'a Setup,
    data: &'a Datasets,
    kind: SchemeKind,
    assignment: LayerAssignment,
    schedule: UnfreezeSchedule,
    policy: PipelinePolicy,
    /// Fixed compute device (single-device baseline); otherwise each data owner computes.
    compute_device: Option<DeviceId>,
    order: Vec<DeviceId>,
    params: ModelParams,
    heads: BTreeMap<DeviceId, HeadParams>,
    head_holder: DeviceId,
    stream: BatchStream,
    clock: f64,
    reported: Vec<f64>,
    events: Vec<Event>,
    record: RunRecord,
}

impl<'a> Trainer<'a> {
    pub fn new(
        kind: SchemeKind,
        params: ModelParams,
        data: &'a Datasets,
        setup: &'a Setup,
    ) -> Result<Self, TrainerError> {
        setup.validate()?;
        let cluster = &setup.cluster;
        for d in cluster.ids() {
            if !data.train.get(&d).is_some_and(|ds| !ds.is_empty()) {
                return Err(TrainerError::MissingData(d));
            }
        }
        let l = setup.spec.num_layers;
        let first = setup.training.first_initiator.unwrap_or(cluster.ids()[0]);
        let order = initiator_order(cluster, first)?;
        let (assignment, schedule, policy, compute_device) = match kind {
            SchemeKind::RingAda => (
                setup.assignment.clone(),
                setup.training.schedule,
                PipelinePolicy::ring(),
                None,
            ),
            SchemeKind::PipeAdapter => {
                let stages = setup.assignment.spans().len();
                (
                    setup.assignment.clone(),
                    UnfreezeSchedule::fixed(l),
                    PipelinePolicy::stashed(stages),
                    None,
                )
            }
            SchemeKind::Single => {
                let dev = setup.single_device.unwrap_or(cluster.ids()[0]);
                cluster.profile(dev)?;
                (
                    LayerAssignment::single(dev, l)?,
                    UnfreezeSchedule::fixed(l),
                    PipelinePolicy::ring(),
                    Some(dev),
                )
            }
        };
        let head_holder = compute_device.unwrap_or(first);
        let holders = match compute_device {
            Some(d) => vec![d],
            None => cluster.ids(),
        };
        let heads = holders
            .into_iter()
            .map(|d| (d, params.head.clone()))
            .collect();
        let stream = BatchStream::new(data, setup.training.batch_size, setup.training.seed);
        let record = RunRecord {
            scheme: kind,
            iterations: Vec::new(),
            reports: Vec::new(),
            rounds_completed: 0,
            converged: false,
            epochs_to_convergence: 0,
            convergence_time_s: 0.0,
            handoff_seconds: 0.0,
            final_accuracy: 0.0,
            final_eval_loss: 0.0,
            memory: MemoryLedger::default(),
            events: None,
        };
        Ok(Self {
            setup,
            data,
            kind,
            assignment,
            schedule,
            policy,
            compute_device,
            order,
            params,
            heads,
            head_holder,
            stream,
            clock: 0.0,
            reported: Vec::new(),
            events: Vec::new(),
            record,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn heads(&self) -> &BTreeMap<DeviceId, HeadParams> {
        &self.heads
    }

    pub fn initiator_order(&self) -> &[DeviceId] {
        &self.order
    }

    /// One round: every device initiates `I` iterations in turn.
    pub fn run_round(&mut self, round: usize) -> Result<(), TrainerError> {
        let setup = self.setup;
        let cfg = &setup.training;
        let depth = self.schedule.depth_at_round(round);
        let state = RoundState::new(
            round,
            depth,
            self.order.clone(),
            cfg.local_iterations,
            &setup.cluster.ids(),
        )?;
        let mask = FreezeMask::new(setup.spec.num_layers, depth)?;
        for &owner in &state.initiator_order {
            let initiator = self.compute_device.unwrap_or(owner);
            if self.head_holder != initiator {
                let from = self.head_holder;
                let dt = handoff_head(
                    from,
                    initiator,
                    &mut self.heads,
                    &setup.cluster,
                    &setup.cost,
                )?;
                if setup.record_events {
                    self.events.push(Event {
                        start: self.clock,
                        end: self.clock + dt,
                        task: Task {
                            kind: TaskKind::HeadHandoffTransfer,
                            place: Place::Link {
                                src: from,
                                dst: initiator,
                            },
                            batch: self.stream.issued(),
                            layer_begin: setup.spec.num_layers + 1,
                            layer_end: setup.spec.num_layers + 1,
                            duration: dt,
                        },
                    });
                }
                self.clock += dt;
                self.record.handoff_seconds += dt;
                self.head_holder = initiator;
            }
            self.params.head = self.heads[&initiator].clone();

            let batches = (0..state.local_iterations)
                .map(|_| self.stream.next_batch(self.data, owner))
                .collect::<Result<Vec<OwnedBatch>, _>>()?;
            for b in &batches {
                assert_eq!(
                    b.owner, owner,
                    "labels may only be used by the device that owns them"
                );
            }

            let log = simulate_pipeline_with(
                &self.assignment,
                &setup.cost,
                &setup.cluster,
                depth,
                initiator,
                batches.len(),
                self.policy,
            )?;
            let log = ValidatedLog::new(log, &self.assignment, depth).map_err(|v| {
                TrainerError::Schedule {
                    count: v.len(),
                    first: v[0].to_string(),
                }
            })?;
            let ledger = account_memory(&log, &setup.spec, cfg.batch_size, self.kind);
            self.record.memory.merge_max(&ledger);

            let outcomes = if self.kind == SchemeKind::PipeAdapter {
                pipeline::execute(
                    &mut self.params,
                    &batches,
                    log.log(),
                    depth,
                    cfg.learning_rate,
                )?
            } else {
                let mut out = Vec::with_capacity(batches.len());
                for ob in &batches {
                    let (logits, cache) = full_forward(&self.params, &ob.batch, depth)?;
                    let loss = loss_and_head_grad(&self.params, &cache, &logits, &ob.batch.labels)?;
                    let grads = backward_early_stop(&cache, &loss, &self.params, depth)?;
                    self.params.apply_update(&grads, cfg.learning_rate, &mask)?;
                    out.push((loss.loss, loss.correct));
                }
                out
            };

            let mut done = 0.0f64;
            let mut turn_loss = 0.0;
            for (i, (ob, &(loss, correct))) in batches.iter().zip(&outcomes).enumerate() {
                if !loss.is_finite() {
                    return Err(TrainerError::NonFiniteLoss { round });
                }
                done = done.max(log.log().batch_completion(i as u64).unwrap_or(0.0));
                turn_loss += loss;
                self.record.iterations.push(IterationRecord {
                    round,
                    initiator: owner,
                    batch_id: ob.batch.id,
                    depth,
                    loss,
                    accuracy: correct as f64 / ob.batch.batch_size() as f64,
                    clock: self.clock + done,
                });
            }
            self.heads.insert(initiator, self.params.head.clone());
            let makespan = log.log().makespan();
            if setup.record_events {
                let shifted = log.log().shifted(self.clock, batches[0].batch.id);
                self.events.extend(shifted.events);
            }
            self.clock += makespan;
            let mean = turn_loss / outcomes.len() as f64;
            self.reported.push(mean);
            self.record.reports.push(TurnReport {
                round,
                initiator: owner,
                loss: mean,
                clock: self.clock,
            });
        }
        self.record.rounds_completed = round;
        Ok(())
    }

    /// Rounds until the convergence rule fires or the round budget runs out,
    /// followed by evaluation on the held-out split.
    pub fn run_until_converged(mut self) -> Result<(ModelParams, RunRecord), TrainerError> {
        let cfg = &self.setup.training;
        for round in 1..=cfg.max_rounds {
            self.run_round(round)?;
            if cfg.convergence.converged(&self.reported) {
                self.record.converged = true;
                break;
            }
        }
        self.record.epochs_to_convergence = self.record.rounds_completed;
        self.record.convergence_time_s = self.clock;
        self.params.head = self.heads[&self.head_holder].clone();
        let (acc, loss) = evaluate(&self.params, self.data)?;
        self.record.final_accuracy = acc;
        self.record.final_eval_loss = loss;
        if self.setup.record_events {
            self.record.events = Some(EventLog::new(
                std::mem::take(&mut self.events),
                self.policy.window,
            ));
        }
        Ok((self.params, self.record))
    }
}

/// Accuracy and mean loss over the union of every device's held-out samples.
pub fn evaluate(params: &ModelParams, data: &Datasets) -> Result<(f64, f64), TrainerError> {
    const CHUNK: usize = 64;
    let (mut correct, mut loss, mut count) = (0usize, 0.0, 0usize);
    for ds in data.eval.values() {
        let rows: Vec<usize> = (0..ds.len()).collect();
        for chunk in rows.chunks(CHUNK) {
            let batch = ds.batch(0, chunk)?;
            let (logits, _) = full_forward(params, &batch, 1)?;
            let (l, _) = crate::engine::cross_entropy(&logits, &batch.labels)?;
            loss += l * chunk.len() as f64;
            correct += logits
                .predictions()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            count += chunk.len();
        }
    }
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((correct as f64 / count as f64, loss / count as f64))
}
