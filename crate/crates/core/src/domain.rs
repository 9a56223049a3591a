//! Domain types shared by the engine, the simulator and the training driver.
//!
//! Layers are numbered `1..=L` from the bottom of the transformer stack. The
//! embedding layer is addressed as layer `0` and the head as layer `L + 1`
//! wherever a layer index has to name them (event logs, memory ledger).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid profile for device {device}: {reason}")]
    InvalidProfile { device: DeviceId, reason: String },
    #[error("invalid layer assignment: {0}")]
    InvalidAssignment(String),
    #[error("invalid unfreeze schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("invalid depth {depth}: must lie in [1, {num_layers}]")]
    InvalidDepth { depth: usize, num_layers: usize },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("no link rate from {src} to {dst}")]
    UnreachableDevice { src: DeviceId, dst: DeviceId },
    #[error("invalid round state: {0}")]
    InvalidRound(String),
}

/// Identifier of an edge device. Ids are 1-based to match the usual `u1..uU` naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// Architecture of the transformer being fine-tuned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    /// Bytes per scalar used for memory accounting (the engine itself always runs in f64).
    pub scalar_bytes: usize,
}

impl LMSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
            ("scalar_bytes", self.scalar_bytes),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(DomainError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.bottleneck_dim >= self.hidden_dim {
            return Err(DomainError::InvalidSpec(format!(
                "bottleneck_dim {} must be smaller than hidden_dim {}",
                self.bottleneck_dim, self.hidden_dim
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(DomainError::InvalidSpec(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Scalars in one frozen transformer block (attention, feed-forward, two layer norms).
    pub fn block_param_count(&self) -> usize {
        let n = self.hidden_dim;
        let f = self.ffn_dim();
        4 * (n * n + n) + (n * f + f) + (f * n + n) + 4 * n
    }

    pub fn adapter_param_count(&self) -> usize {
        2 * self.hidden_dim * self.bottleneck_dim
    }

    /// Token table plus positional table.
    pub fn embedding_param_count(&self) -> usize {
        (self.vocab_size + self.seq_len) * self.hidden_dim
    }

    pub fn head_param_count(&self) -> usize {
        self.hidden_dim * self.num_classes + self.num_classes
    }

    pub fn total_param_count(&self) -> usize {
        self.embedding_param_count()
            + self.num_layers * (self.block_param_count() + self.adapter_param_count())
            + self.head_param_count()
    }

    /// Trainable scalars at the given unfreezing depth: the head plus the top `depth` adapters.
    pub fn trainable_param_count(&self, depth: usize) -> usize {
        self.head_param_count() + depth.min(self.num_layers) * self.adapter_param_count()
    }

    /// Bytes of one activation tensor crossing a layer boundary.
    pub fn activation_bytes(&self, batch_size: usize) -> u64 {
        (batch_size * self.seq_len * self.hidden_dim * self.scalar_bytes) as u64
    }

    pub fn check_depth(&self, depth: usize) -> Result<(), DomainError> {
        check_depth(self.num_layers, depth)
    }
}

pub(crate) fn check_depth(num_layers: usize, depth: usize) -> Result<(), DomainError> {
    if depth == 0 || depth > num_layers {
        return Err(DomainError::InvalidDepth { depth, num_layers });
    }
    Ok(())
}

/// Lowest layer whose adapter is trainable at `depth`; backpropagation stops here.
pub fn stop_layer(num_layers: usize, depth: usize) -> usize {
    num_layers + 1 - depth
}

/// State information a device reports to the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: DeviceId,
    /// Relative speed; lookup-table times are divided by this.
    pub compute_speed: f64,
    pub memory_budget: u64,
    /// Outgoing link rates in bytes per second, keyed by receiving peer.
    pub link_rates: BTreeMap<DeviceId, f64>,
}

/// The set of participating devices, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    profiles: BTreeMap<DeviceId, DeviceProfile>,
}

impl Cluster {
    pub fn new(profiles: Vec<DeviceProfile>) -> Result<Self, DomainError> {
        if profiles.is_empty() {
            return Err(DomainError::InvalidAssignment(
                "cluster has no devices".into(),
            ));
        }
        let mut map = BTreeMap::new();
        for p in profiles {
            if map.contains_key(&p.device_id) {
                return Err(DomainError::InvalidProfile {
                    device: p.device_id,
                    reason: "duplicate device id".into(),
                });
            }
            map.insert(p.device_id, p);
        }
        let ids: Vec<DeviceId> = map.keys().copied().collect();
        for p in map.values() {
            if !(p.compute_speed > 0.0 && p.compute_speed.is_finite()) {
                return Err(DomainError::InvalidProfile {
                    device: p.device_id,
                    reason: format!("compute_speed must be positive, got {}", p.compute_speed),
                });
            }
            for peer in ids.iter().filter(|&&id| id != p.device_id) {
                match p.link_rates.get(peer) {
                    Some(r) if *r > 0.0 && r.is_finite() => {}
                    Some(r) => {
                        return Err(DomainError::InvalidProfile {
                            device: p.device_id,
                            reason: format!("link rate to {peer} must be positive, got {r}"),
                        })
                    }
                    None => {
                        return Err(DomainError::InvalidProfile {
                            device: p.device_id,
                            reason: format!("missing link rate to {peer}"),
                        })
                    }
                }
            }
        }
        Ok(Self { profiles: map })
    }

    /// `count` devices with identical speed and uniform link rates; ids `1..=count`.
    pub fn uniform(count: u32, compute_speed: f64, link_rate: f64, memory_budget: u64) -> Self {
        let profiles = (1..=count)
            .map(|u| DeviceProfile {
                device_id: DeviceId(u),
                compute_speed,
                memory_budget,
                link_rates: (1..=count)
                    .filter(|&v| v != u)
                    .map(|v| (DeviceId(v), link_rate))
                    .collect(),
            })
            .collect();
        Self::new(profiles).expect("uniform cluster parameters must be positive")
    }

    pub fn profile(&self, id: DeviceId) -> Result<&DeviceProfile, DomainError> {
        self.profiles.get(&id).ok_or(DomainError::UnknownDevice(id))
    }

    pub fn profiles(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.profiles.values()
    }

    pub fn ids(&self) -> Vec<DeviceId> {
        self.profiles.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn speed(&self, id: DeviceId) -> Result<f64, DomainError> {
        Ok(self.profile(id)?.compute_speed)
    }

    /// Rate of the directed link `src -> dst` in bytes per second.
    pub fn rate(&self, src: DeviceId, dst: DeviceId) -> Result<f64, DomainError> {
        self.profile(src)?
            .link_rates
            .get(&dst)
            .copied()
            .filter(|r| *r > 0.0)
            .ok_or(DomainError::UnreachableDevice { src, dst })
    }
}

/// Contiguous range of transformer blocks hosted by one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub device: DeviceId,
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.begin <= layer && layer <= self.end
    }
}

/// Where a device sits relative to the stop layer at a given depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceRole {
    /// Whole span lies below the stop layer: streams forwards, never backwards.
    PureForward,
    /// Holds the stop layer.
    Terminator,
    /// Whole span lies above the stop layer.
    Upper,
}

/// Placement of the `L` transformer blocks on the ring. Ring order is span order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssignment {
    spans: Vec<Span>,
    num_layers: usize,
}

impl LayerAssignment {
    pub fn new(spans: Vec<Span>, num_layers: usize) -> Result<Self, DomainError> {
        if spans.is_empty() {
            return Err(DomainError::InvalidAssignment("no spans".into()));
        }
        let mut seen = BTreeSet::new();
        let mut next = 1;
        for s in &spans {
            if !seen.insert(s.device) {
                return Err(DomainError::InvalidAssignment(format!(
                    "device {} appears more than once",
                    s.device
                )));
            }
            if s.begin > s.end {
                return Err(DomainError::InvalidAssignment(format!(
                    "span of {} is reversed ({}..{})",
                    s.device, s.begin, s.end
                )));
            }
            if s.begin != next {
                return Err(DomainError::InvalidAssignment(format!(
                    "span of {} starts at layer {} but layer {} is next",
                    s.device, s.begin, next
                )));
            }
            next = s.end + 1;
        }
        if next != num_layers + 1 {
            return Err(DomainError::InvalidAssignment(format!(
                "spans cover layers 1..{} but the model has {} layers",
                next - 1,
                num_layers
            )));
        }
        Ok(Self { spans, num_layers })
    }

    /// Builds spans from per-device layer counts, e.g. `[4, 5, 2, 3]`.
    pub fn from_sizes(devices: &[DeviceId], sizes: &[usize]) -> Result<Self, DomainError> {
        if devices.len() != sizes.len() {
            return Err(DomainError::InvalidAssignment(format!(
                "{} devices but {} span sizes",
                devices.len(),
                sizes.len()
            )));
        }
        let mut spans = Vec::with_capacity(sizes.len());
        let mut begin = 1;
        for (&device, &size) in devices.iter().zip(sizes) {
            if size == 0 {
                return Err(DomainError::InvalidAssignment(format!(
                    "device {device} has no layers"
                )));
            }
            spans.push(Span {
                device,
                begin,
                end: begin + size - 1,
            });
            begin += size;
        }
        Self::new(spans, begin - 1)
    }

    /// Every layer on one device.
    pub fn single(device: DeviceId, num_layers: usize) -> Result<Self, DomainError> {
        Self::new(
            vec![Span {
                device,
                begin: 1,
                end: num_layers,
            }],
            num_layers,
        )
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        self.spans.iter().map(|s| s.device).collect()
    }

    pub fn span_of(&self, device: DeviceId) -> Option<&Span> {
        self.spans.iter().find(|s| s.device == device)
    }

    pub fn device_of_layer(&self, layer: usize) -> Option<DeviceId> {
        self.spans
            .iter()
            .find(|s| s.contains(layer))
            .map(|s| s.device)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.spans.iter().map(Span::len).collect()
    }

    /// The device owning the lowest unfrozen adapter at `depth`.
    pub fn terminator(&self, depth: usize) -> Result<DeviceId, DomainError> {
        check_depth(self.num_layers, depth)?;
        let stop = stop_layer(self.num_layers, depth);
        let found: Vec<DeviceId> = self
            .spans
            .iter()
            .filter(|s| s.begin <= stop && stop <= s.end)
            .map(|s| s.device)
            .collect();
        debug_assert_eq!(found.len(), 1);
        Ok(found[0])
    }

    /// Devices whose span lies entirely below the stop layer.
    pub fn pure_forward_devices(&self, depth: usize) -> Result<BTreeSet<DeviceId>, DomainError> {
        check_depth(self.num_layers, depth)?;
        let stop = stop_layer(self.num_layers, depth);
        Ok(self
            .spans
            .iter()
            .filter(|s| s.end < stop)
            .map(|s| s.device)
            .collect())
    }

    pub fn role(&self, device: DeviceId, depth: usize) -> Result<DeviceRole, DomainError> {
        check_depth(self.num_layers, depth)?;
        let span = self
            .span_of(device)
            .ok_or(DomainError::UnknownDevice(device))?;
        let stop = stop_layer(self.num_layers, depth);
        Ok(if span.end < stop {
            DeviceRole::PureForward
        } else if span.begin <= stop {
            DeviceRole::Terminator
        } else {
            DeviceRole::Upper
        })
    }
}

/// Top-down adapter unfreezing, keyed on training rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfreezeSchedule {
    pub initial_depth: usize,
    /// One more adapter is unfrozen every `interval_rounds` rounds.
    pub interval_rounds: usize,
    pub max_depth: usize,
}

impl UnfreezeSchedule {
    /// Head and top-most adapter trainable at start, all adapters eventually.
    pub fn top_down(num_layers: usize, interval_rounds: usize) -> Self {
        Self {
            initial_depth: 1,
            interval_rounds,
            max_depth: num_layers,
        }
    }

    /// Depth pinned at `depth` for every round.
    pub fn fixed(depth: usize) -> Self {
        Self {
            initial_depth: depth,
            interval_rounds: 1,
            max_depth: depth,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), DomainError> {
        if self.initial_depth == 0 {
            return Err(DomainError::InvalidSchedule(
                "initial_depth must be at least 1".into(),
            ));
        }
        if self.interval_rounds == 0 {
            return Err(DomainError::InvalidSchedule(
                "interval_rounds must be at least 1".into(),
            ));
        }
        if self.max_depth > num_layers || self.max_depth < self.initial_depth {
            return Err(DomainError::InvalidSchedule(format!(
                "max_depth {} must lie in [initial_depth {}, num_layers {}]",
                self.max_depth, self.initial_depth, num_layers
            )));
        }
        Ok(())
    }

    /// Unfreezing depth in (1-based) round `round`.
    pub fn depth_at_round(&self, round: usize) -> usize {
        debug_assert!(round >= 1, "rounds are 1-based");
        let steps = round.saturating_sub(1) / self.interval_rounds;
        self.initial_depth.saturating_add(steps).min(self.max_depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Emb,
    Trm,
    TrmWithAdapter,
    Hed,
}

/// Seconds at unit compute speed for each layer kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub emb: f64,
    pub trm: f64,
    pub trm_with_adapter: f64,
    pub hed: f64,
}

impl PhaseTimes {
    pub fn uniform(t: f64) -> Self {
        Self {
            emb: t,
            trm: t,
            trm_with_adapter: t,
            hed: t,
        }
    }

    pub fn get(&self, kind: LayerKind) -> f64 {
        match kind {
            LayerKind::Emb => self.emb,
            LayerKind::Trm => self.trm,
            LayerKind::TrmWithAdapter => self.trm_with_adapter,
            LayerKind::Hed => self.hed,
        }
    }

    fn all_positive(&self) -> bool {
        [self.emb, self.trm, self.trm_with_adapter, self.hed]
            .iter()
            .all(|t| *t > 0.0 && t.is_finite())
    }
}

/// Lookup-table costs driving the virtual clock.
///
/// Every block in this model carries an adapter, so the simulator bills
/// `TrmWithAdapter` per block; the `Trm` entry is kept so tables profiled on
/// bare blocks can be carried alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub fw_time: PhaseTimes,
    pub bw_time: PhaseTimes,
    pub activation_msg_bytes: u64,
    pub gradient_msg_bytes: u64,
    pub head_params_bytes: u64,
}

impl CostModel {
    /// Every forward costs `fw`, every backward `bw`, every message `msg_bytes`.
    pub fn unit(fw: f64, bw: f64, msg_bytes: u64) -> Self {
        Self {
            fw_time: PhaseTimes::uniform(fw),
            bw_time: PhaseTimes::uniform(bw),
            activation_msg_bytes: msg_bytes,
            gradient_msg_bytes: msg_bytes,
            head_params_bytes: msg_bytes,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if !self.fw_time.all_positive() || !self.bw_time.all_positive() {
            return Err(DomainError::InvalidCostModel(
                "all compute times must be positive".into(),
            ));
        }
        if self.activation_msg_bytes == 0
            || self.gradient_msg_bytes == 0
            || self.head_params_bytes == 0
        {
            return Err(DomainError::InvalidCostModel(
                "all message sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn fw(&self, kind: LayerKind, layers: usize, speed: f64) -> f64 {
        self.fw_time.get(kind) * layers as f64 / speed
    }

    pub fn bw(&self, kind: LayerKind, layers: usize, speed: f64) -> f64 {
        self.bw_time.get(kind) * layers as f64 / speed
    }
}

/// Coordinator view of one training round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundState {
    pub round_index: usize,
    pub current_depth: usize,
    pub initiator_order: Vec<DeviceId>,
    pub local_iterations: usize,
}

impl RoundState {
    pub fn new(
        round_index: usize,
        current_depth: usize,
        initiator_order: Vec<DeviceId>,
        local_iterations: usize,
        participants: &[DeviceId],
    ) -> Result<Self, DomainError> {
        if round_index == 0 {
            return Err(DomainError::InvalidRound("rounds are 1-based".into()));
        }
        if local_iterations == 0 {
            return Err(DomainError::InvalidRound(
                "local_iterations must be at least 1".into(),
            ));
        }
        let mut order: Vec<DeviceId> = initiator_order.clone();
        order.sort();
        let mut expected = participants.to_vec();
        expected.sort();
        if order != expected {
            return Err(DomainError::InvalidRound(
                "initiator order must visit every participant exactly once".into(),
            ));
        }
        Ok(Self {
            round_index,
            current_depth,
            initiator_order,
            local_iterations,
        })
    }
}
