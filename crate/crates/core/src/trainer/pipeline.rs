//! Replays a weight-stashing pipeline schedule on real parameters.
//!
//! Each event of the turn's log is executed in start order against the live
//! parameters. A stage stashes the trainable set when it forwards a batch
//! and computes that batch's gradients against the stash later, applying
//! them to whatever version is live by then.

use std::collections::BTreeMap;

use crate::domain::{stop_layer, DeviceId};
use crate::engine::{
    backward_layers, embed, forward_layers, head_forward, head_loss_grad, restore_trainables,
    snapshot_trainables, BlockCache, FreezeMask, GradientSet, Logits, ModelParams, Tensor3,
    WeightSnapshot,
};
use crate::sim::{EventLog, TaskKind};

use super::{OwnedBatch, TrainerError};

/// Head output awaiting its update: logits, pooled features, dims and the head weights used.
type HeadStash = (Logits, Vec<f64>, (usize, usize, usize), WeightSnapshot);

#[derive(Default)]
struct InFlight {
    x: Option<Tensor3>,
    caches: BTreeMap<usize, BlockCache>,
    stash: BTreeMap<DeviceId, WeightSnapshot>,
    head: Option<HeadStash>,
    grad: Option<Vec<f64>>,
    outcome: Option<(f64, usize)>,
}

fn stashed_copy(params: &ModelParams, stash: &WeightSnapshot) -> Result<ModelParams, TrainerError> {
    let mut work = params.clone();
    restore_trainables(&mut work, stash)?;
    Ok(work)
}

/// Runs the turn; batch `i` of the log is `batches[i]`. Returns loss and
/// number of correct predictions per batch.
pub(crate) fn execute(
    params: &mut ModelParams,
    batches: &[OwnedBatch],
    log: &EventLog,
    depth: usize,
    lr: f64,
) -> Result<Vec<(f64, usize)>, TrainerError> {
    let l = params.num_layers();
    let stop = stop_layer(l, depth);
    let mask = FreezeMask::new(l, depth)?;
    let classes = params.spec.num_classes;
    let mut state: Vec<InFlight> = batches.iter().map(|_| InFlight::default()).collect();
    let missing = |what: &str, b: u64| {
        TrainerError::InvalidConfig(format!("pipeline replay: {what} missing for batch {b}"))
    };

    for e in &log.events {
        let t = &e.task;
        let b = t.batch as usize;
        let (Some(st), Some(ob)) = (state.get_mut(b), batches.get(b)) else {
            continue;
        };
        let dev = t.place.device();
        match t.kind {
            TaskKind::FwCompute if t.layer_begin == 0 => {
                st.x = Some(embed(params, &ob.batch)?);
            }
            TaskKind::FwCompute if t.layer_begin == l + 1 => {
                let x = st.x.take().ok_or_else(|| missing("head input", t.batch))?;
                let (logits, pooled) = head_forward(&params.head, &x, classes);
                if logits.values.iter().any(|v| !v.is_finite()) {
                    return Err(crate::engine::EngineError::NonFiniteActivation {
                        layer: Some(l + 1),
                    }
                    .into());
                }
                st.head = Some((logits, pooled, x.dims(), snapshot_trainables(params)));
            }
            TaskKind::FwCompute => {
                let x = st.x.take().ok_or_else(|| missing("activation", t.batch))?;
                st.stash.insert(dev, snapshot_trainables(params));
                let (out, caches) = forward_layers(params, x, t.layer_begin..=t.layer_end, stop)?;
                st.caches.extend(caches);
                st.x = Some(out);
            }
            TaskKind::HeadUpdateCompute => {
                let (logits, pooled, dims, snap) = st
                    .head
                    .take()
                    .ok_or_else(|| missing("head forward", t.batch))?;
                let work = stashed_copy(params, &snap)?;
                let out = head_loss_grad(&work.head, &pooled, dims, &logits, &ob.batch.labels)?;
                let grads = GradientSet {
                    version: snap.version,
                    head: Some(out.head),
                    adapters: BTreeMap::new(),
                };
                params.apply_stashed_update(&grads, lr, &mask)?;
                st.grad = Some(out.d_hidden.into_vec());
                st.outcome = Some((out.loss, out.correct));
            }
            TaskKind::BwCompute => {
                let d = st.grad.take().ok_or_else(|| missing("gradient", t.batch))?;
                let snap = st
                    .stash
                    .get(&dev)
                    .ok_or_else(|| missing("stash", t.batch))?;
                let work = stashed_copy(params, snap)?;
                let (below, adapters) = backward_layers(
                    &work,
                    &st.caches,
                    d,
                    t.layer_begin..=t.layer_end,
                    t.layer_begin > stop,
                )?;
                let grads = GradientSet {
                    version: snap.version,
                    head: None,
                    adapters,
                };
                params.apply_stashed_update(&grads, lr, &mask)?;
                st.grad = below;
            }
            _ => {}
        }
    }
    state
        .into_iter()
        .enumerate()
        .map(|(b, st)| st.outcome.ok_or_else(|| missing("loss", b as u64)))
        .collect()
}
