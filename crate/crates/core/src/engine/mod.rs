//! Desk-scale transformer with serial adapters: explicit forward and backward
//! passes, freeze masks, early-stopped backpropagation and SGD updates.
//!
//! Everything runs in `f64` and is a deterministic function of its inputs.

mod block;
mod gradcheck;
mod grads;
mod model;
mod params;
mod snapshot;
mod tensor;

use thiserror::Error;

use crate::domain::DomainError;

pub use block::{adapter_forward, block_forward, BlockCache};
pub use gradcheck::{
    analytic_gradients, finite_difference_check, finite_difference_check_with, MAX_CHECKED_SCALARS,
};
pub use grads::{AdapterGrads, FreezeMask, GradientSet, HeadGrads};
pub use model::{
    backward_early_stop, backward_layers, cross_entropy, embed, forward_layers,
    full_backward_reference, full_forward, head_forward, head_loss_grad, loss_and_head_grad,
    ActivationCache, Batch, LayerBackward, Logits, LossOutput,
};
pub use params::{
    Activation, AdapterParams, HeadParams, InitOptions, LayerNorm, Linear, ModelParams,
    TrmBlockParams,
};
pub use snapshot::{
    restore_trainables, snapshot_trainables, GroupTag, SnapshotGroup, WeightSnapshot,
};
pub use tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activation{}", fmt_layer(*.layer))]
    NonFiniteActivation { layer: Option<usize> },
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("missing activation cache{}", fmt_layer(*.layer))]
    MissingCache { layer: Option<usize> },
    #[error("gradient targets frozen parameter group {group}")]
    FrozenParameterTouched { group: String },
    #[error("gradients computed against version {gradient_version} but parameters are at {params_version}")]
    StaleGradients {
        gradient_version: u64,
        params_version: u64,
    },
    #[error("snapshot shape mismatch: {0}")]
    SnapshotShapeMismatch(String),
    #[error("malformed snapshot stream: {0}")]
    SnapshotDecode(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn fmt_layer(layer: Option<usize>) -> String {
    layer.map(|l| format!(" at layer {l}")).unwrap_or_default()
}

impl EngineError {
    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            EngineError::NonFiniteActivation { layer: None } => {
                EngineError::NonFiniteActivation { layer: Some(layer) }
            }
            EngineError::MissingCache { layer: None } => {
                EngineError::MissingCache { layer: Some(layer) }
            }
            other => other,
        }
    }
}
