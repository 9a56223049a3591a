use std::collections::BTreeMap;

use crate::baselines::SchemeKind;
use crate::domain::{DeviceId, LMSpec, LayerAssignment};

use super::log::{Place, TaskKind};
use super::validate::ValidatedLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceMemory {
    pub static_bytes: u64,
    pub peak_bytes: u64,
}

/// Per-device resident bytes: static weights plus the peak of activation
/// caches and weight stashes over the log.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryLedger {
    pub devices: BTreeMap<DeviceId, DeviceMemory>,
}

impl MemoryLedger {
    pub fn peak(&self, device: DeviceId) -> Option<u64> {
        self.devices.get(&device).map(|d| d.peak_bytes)
    }

    pub fn max_peak(&self) -> u64 {
        self.devices
            .values()
            .map(|d| d.peak_bytes)
            .max()
            .unwrap_or(0)
    }

    pub fn mean_peak(&self) -> f64 {
        if self.devices.is_empty() {
            return 0.0;
        }
        self.devices
            .values()
            .map(|d| d.peak_bytes as f64)
            .sum::<f64>()
            / self.devices.len() as f64
    }

    /// Componentwise maximum, for folding ledgers of consecutive turns.
    pub fn merge_max(&mut self, other: &MemoryLedger) {
        for (id, m) in &other.devices {
            let e = self.devices.entry(*id).or_default();
            e.static_bytes = e.static_bytes.max(m.static_bytes);
            e.peak_bytes = e.peak_bytes.max(m.peak_bytes);
        }
    }
}

/// Weights a device keeps resident: its blocks and adapters plus replicas
/// of the embedding and head (any device may act as initiator).
pub fn static_weight_bytes(spec: &LMSpec, span_len: usize) -> u64 {
    let params = span_len * (spec.block_param_count() + spec.adapter_param_count())
        + spec.embedding_param_count()
        + spec.head_param_count();
    (params * spec.scalar_bytes) as u64
}

fn static_for(spec: &LMSpec, assignment: &LayerAssignment, device: DeviceId) -> u64 {
    static_weight_bytes(spec, assignment.span_of(device).map_or(0, |s| s.len()))
}

/// Peak memory per device over a validated log.
///
/// A device caches one `B x S x n` boundary per layer it will backpropagate
/// through, from the start of that batch's forward to the end of its
/// backward; pure-forward devices and layers below the stop layer retain
/// nothing. The initiator additionally holds the last hidden state from the
/// head forward until the head update. Under [`SchemeKind::PipeAdapter`]
/// each in-flight batch also pins a stash of the device's trainable
/// parameters (its adapters, plus the head at the initiator).
pub fn account_memory(
    log: &ValidatedLog,
    spec: &LMSpec,
    batch_size: usize,
    scheme: SchemeKind,
) -> MemoryLedger {
    let assignment = log.assignment();
    let head_layer = assignment.num_layers() + 1;
    let sb = spec.scalar_bytes as u64;
    let boundary = spec.activation_bytes(batch_size);
    let stash = scheme == SchemeKind::PipeAdapter;

    // (device, batch) -> forward start, for pairing with the backward.
    let mut fw_start: BTreeMap<(DeviceId, u64), f64> = BTreeMap::new();
    let mut head_start: BTreeMap<(DeviceId, u64), f64> = BTreeMap::new();
    for e in &log.log().events {
        if let (TaskKind::FwCompute, Place::Device(d)) = (e.task.kind, e.task.place) {
            if e.task.layer_begin == head_layer {
                head_start.insert((d, e.task.batch), e.start);
            } else if e.task.layer_begin > 0 {
                fw_start.insert((d, e.task.batch), e.start);
            }
        }
    }

    // (time, delta) with frees ordered before allocations at equal times.
    let mut deltas: BTreeMap<DeviceId, Vec<(f64, i64)>> = BTreeMap::new();
    let mut hold = |d: DeviceId, from: f64, to: f64, bytes: u64| {
        let v = deltas.entry(d).or_default();
        v.push((from, bytes as i64));
        v.push((to, -(bytes as i64)));
    };
    for e in &log.log().events {
        let (d, b) = (e.task.place.device(), e.task.batch);
        match e.task.kind {
            TaskKind::BwCompute => {
                let from = fw_start[&(d, b)];
                let layers = (e.task.layer_end - e.task.layer_begin + 1) as u64;
                let mut bytes = layers * boundary;
                if stash {
                    let span = assignment.span_of(d).map_or(0, |s| s.len());
                    bytes += (span * spec.adapter_param_count()) as u64 * sb;
                }
                hold(d, from, e.end, bytes);
            }
            TaskKind::HeadUpdateCompute => {
                let from = head_start[&(d, b)];
                let mut bytes = boundary;
                if stash {
                    bytes += spec.head_param_count() as u64 * sb;
                }
                hold(d, from, e.end, bytes);
            }
            _ => {}
        }
    }

    let mut ledger = MemoryLedger::default();
    for d in assignment.devices() {
        let static_bytes = static_for(spec, assignment, d);
        let mut v = deltas.remove(&d).unwrap_or_default();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut cur, mut peak) = (0i64, 0i64);
        for (_, delta) in v {
            cur += delta;
            peak = peak.max(cur);
        }
        ledger.devices.insert(
            d,
            DeviceMemory {
                static_bytes,
                peak_bytes: static_bytes + peak as u64,
            },
        );
    }
    ledger
}
