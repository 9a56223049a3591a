use std::collections::BTreeMap;

use crate::domain::{stop_layer, Cluster, CostModel, DeviceId, LayerAssignment, LayerKind};

use super::log::{Event, EventLog, Place, Task, TaskKind};
use super::SimError;

/// How many batches a gated device may have between forward and backward.
///
/// `window = 1` is the no-staleness rule: a device holding a trainable
/// adapter forwards batch `b + 1` only after its backward for `b`. Larger
/// windows model weight-stashing pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelinePolicy {
    pub window: usize,
}

impl PipelinePolicy {
    pub fn ring() -> Self {
        Self { window: 1 }
    }

    pub fn stashed(window: usize) -> Self {
        Self { window }
    }
}

/// One task of the per-batch template.
#[derive(Debug, Clone)]
struct Step {
    task: Task,
    /// Batches this step may run ahead of the backward wave.
    lead: usize,
    /// Step in batch `b - window` this step waits for.
    gate: Option<usize>,
}

fn compute(kind: TaskKind, device: DeviceId, layers: (usize, usize), duration: f64) -> Task {
    Task {
        kind,
        place: Place::Device(device),
        batch: 0,
        layer_begin: layers.0,
        layer_end: layers.1,
        duration,
    }
}

fn transfer(
    kind: TaskKind,
    src: DeviceId,
    dst: DeviceId,
    layer: usize,
    bytes: u64,
    cluster: &Cluster,
) -> Result<Task, SimError> {
    let rate = cluster.rate(src, dst)?;
    Ok(Task {
        kind,
        place: Place::Link { src, dst },
        batch: 0,
        layer_begin: layer,
        layer_end: layer,
        duration: bytes as f64 / rate,
    })
}

/// The task chain one batch walks through: embedding at the initiator, the
/// ring in layer order, back to the initiator for the head, then backward
/// in reverse ring order down to the stop layer.
fn batch_template(
    assignment: &LayerAssignment,
    cost: &CostModel,
    cluster: &Cluster,
    depth: usize,
    initiator: DeviceId,
    policy: PipelinePolicy,
) -> Result<Vec<Step>, SimError> {
    let num_layers = assignment.num_layers();
    let stop = stop_layer(num_layers, depth);
    let pure = assignment.pure_forward_devices(depth)?;
    let init_speed = cluster.speed(initiator)?;

    // Gated stage q of Q leads by min(window - 1, Q - 1 - q), the 1F1B warm-up;
    // pure-forward stages may stream a further `pure.len()` batches ahead.
    let gated_count = assignment.spans().len() - pure.len();
    let gated_lead = |q: usize| (policy.window - 1).min(gated_count - 1 - q);
    let free_lead = pure.len() + gated_lead(0);
    let first_lead = if pure.is_empty() {
        gated_lead(0)
    } else {
        free_lead
    };

    let mut steps = vec![Step {
        task: compute(
            TaskKind::FwCompute,
            initiator,
            (0, 0),
            cost.fw(LayerKind::Emb, 1, init_speed),
        ),
        lead: first_lead,
        gate: None,
    }];
    let mut gated_fw: BTreeMap<DeviceId, usize> = BTreeMap::new();
    let mut prev = initiator;
    let mut q = 0;
    for span in assignment.spans() {
        let is_pure = pure.contains(&span.device);
        let lead = if is_pure { free_lead } else { gated_lead(q) };
        if span.device != prev {
            let t = transfer(
                TaskKind::FwTransfer,
                prev,
                span.device,
                span.begin - 1,
                cost.activation_msg_bytes,
                cluster,
            )?;
            steps.push(Step {
                task: t,
                lead,
                gate: None,
            });
        }
        let speed = cluster.speed(span.device)?;
        let fw = cost.fw(LayerKind::TrmWithAdapter, span.len(), speed);
        if !is_pure {
            gated_fw.insert(span.device, steps.len());
            q += 1;
        }
        steps.push(Step {
            task: compute(TaskKind::FwCompute, span.device, (span.begin, span.end), fw),
            lead,
            gate: None,
        });
        prev = span.device;
    }
    if prev != initiator {
        let t = transfer(
            TaskKind::FwTransfer,
            prev,
            initiator,
            num_layers,
            cost.activation_msg_bytes,
            cluster,
        )?;
        steps.push(Step {
            task: t,
            lead: 0,
            gate: None,
        });
    }
    let head = (num_layers + 1, num_layers + 1);
    let head_fw = steps.len();
    steps.push(Step {
        task: compute(
            TaskKind::FwCompute,
            initiator,
            head,
            cost.fw(LayerKind::Hed, 1, init_speed),
        ),
        lead: 0,
        gate: Some(head_fw + 1),
    });
    steps.push(Step {
        task: compute(
            TaskKind::HeadUpdateCompute,
            initiator,
            head,
            cost.bw(LayerKind::Hed, 1, init_speed),
        ),
        lead: 0,
        gate: None,
    });
    prev = initiator;
    for span in assignment.spans().iter().rev().filter(|s| s.end >= stop) {
        if span.device != prev {
            let t = transfer(
                TaskKind::BwTransfer,
                prev,
                span.device,
                span.end,
                cost.gradient_msg_bytes,
                cluster,
            )?;
            steps.push(Step {
                task: t,
                lead: 0,
                gate: None,
            });
        }
        let begin = span.begin.max(stop);
        let speed = cluster.speed(span.device)?;
        let bw = cost.bw(LayerKind::TrmWithAdapter, span.end - begin + 1, speed);
        let fw_step = gated_fw[&span.device];
        steps[fw_step].gate = Some(steps.len());
        steps.push(Step {
            task: compute(TaskKind::BwCompute, span.device, (begin, span.end), bw),
            lead: 0,
            gate: None,
        });
        prev = span.device;
    }
    Ok(steps)
}

/// Schedule `num_batches` consecutive batches from one initiator under the
/// no-staleness rule.
pub fn simulate_pipeline(
    assignment: &LayerAssignment,
    cost: &CostModel,
    cluster: &Cluster,
    depth: usize,
    initiator: DeviceId,
    num_batches: usize,
) -> Result<EventLog, SimError> {
    simulate_pipeline_with(
        assignment,
        cost,
        cluster,
        depth,
        initiator,
        num_batches,
        PipelinePolicy::ring(),
    )
}

/// Schedule `num_batches` batches with an explicit in-flight window.
///
/// Every task gets a static priority `(batch - lead, step)`. The head and
/// the backward wave have lead 0, the forward on the `q`-th of `Q` gated
/// devices leads by `min(window - 1, Q - 1 - q)`, and work on pure-forward
/// devices (plus the embedding) may run further ahead, by as many batches as
/// there are pure-forward devices. Dependencies and gates all point forward in that order, so a single pass
/// in priority order, starting each task when both its inputs and its
/// resource are free, yields the schedule. Start times are then longest
/// paths in a fixed graph, which makes the makespan monotone in every
/// duration.
pub fn simulate_pipeline_with(
    assignment: &LayerAssignment,
    cost: &CostModel,
    cluster: &Cluster,
    depth: usize,
    initiator: DeviceId,
    num_batches: usize,
    policy: PipelinePolicy,
) -> Result<EventLog, SimError> {
    if num_batches == 0 {
        return Err(SimError::InvalidInput(
            "num_batches must be at least 1".into(),
        ));
    }
    if policy.window == 0 {
        return Err(SimError::InvalidInput(
            "pipeline window must be at least 1".into(),
        ));
    }
    cost.validate()?;
    cluster.profile(initiator)?;
    for d in assignment.devices() {
        cluster.profile(d)?;
    }
    let steps = batch_template(assignment, cost, cluster, depth, initiator, policy)?;
    let per_batch = steps.len();
    let window = policy.window;

    let mut order: Vec<(i64, usize, usize)> = (0..num_batches)
        .flat_map(|b| {
            steps
                .iter()
                .enumerate()
                .map(move |(s, st)| (b as i64 - st.lead as i64, s, b))
        })
        .collect();
    order.sort_unstable();

    let mut end = vec![f64::NAN; num_batches * per_batch];
    let mut free_at: BTreeMap<Place, f64> = BTreeMap::new();
    let mut events = Vec::with_capacity(end.len());
    for (_, s, b) in order {
        let step = &steps[s];
        let mut ready = 0.0f64;
        if s > 0 {
            ready = ready.max(end[b * per_batch + s - 1]);
        }
        if let (Some(g), true) = (step.gate, b >= window) {
            ready = ready.max(end[(b - window) * per_batch + g]);
        }
        debug_assert!(!ready.is_nan(), "priority order must respect dependencies");
        let slot = free_at.entry(step.task.place).or_insert(0.0);
        let start = ready.max(*slot);
        let finish = start + step.task.duration;
        *slot = finish;
        end[b * per_batch + s] = finish;
        events.push(Event {
            start,
            end: finish,
            task: Task {
                batch: b as u64,
                ..step.task
            },
        });
    }
    Ok(EventLog::new(events, window))
}

/// One batch with id `batch_id`, shifted to start at `clock_in`.
pub fn simulate_iteration(
    assignment: &LayerAssignment,
    cost: &CostModel,
    cluster: &Cluster,
    depth: usize,
    initiator: DeviceId,
    batch_id: u64,
    clock_in: f64,
) -> Result<EventLog, SimError> {
    Ok(
        simulate_pipeline(assignment, cost, cluster, depth, initiator, 1)?
            .shifted(clock_in, batch_id),
    )
}
