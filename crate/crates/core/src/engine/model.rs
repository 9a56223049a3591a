use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use super::block::{block_backward, block_forward, BlockCache};
use super::grads::{AdapterGrads, FreezeMask, GradientSet, HeadGrads};
use super::params::{HeadParams, ModelParams};
use super::tensor::{linear, linear_input_grad, linear_weight_grad, Tensor3};
use super::EngineError;
use crate::domain::{check_depth, stop_layer};

/// A mini-batch of token sequences with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub id: u64,
    /// `batch_size x seq_len`, row-major.
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(
        id: u64,
        tokens: Vec<u32>,
        labels: Vec<usize>,
        seq_len: usize,
    ) -> Result<Self, EngineError> {
        if labels.is_empty() || tokens.len() != labels.len() * seq_len {
            return Err(EngineError::ShapeMismatch {
                what: "batch tokens",
                expected: labels.len() * seq_len,
                got: tokens.len(),
            });
        }
        Ok(Self {
            id,
            tokens,
            labels,
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    /// `batch x classes`
    pub values: Vec<f64>,
    pub classes: usize,
}

impl Logits {
    pub fn batch(&self) -> usize {
        self.values.len() / self.classes
    }

    /// Arg-max class per row, lowest index on ties.
    pub fn predictions(&self) -> Vec<usize> {
        self.values
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Stored forward intermediates of one batch.
///
/// Block caches exist exactly for layers at or above the stop layer of the
/// depth the forward ran at.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub batch_id: u64,
    pub version: u64,
    pub depth: usize,
    blocks: BTreeMap<usize, BlockCache>,
    /// Mean-pooled final representation, `batch x hidden`.
    pooled: Vec<f64>,
    dims: (usize, usize, usize),
}

impl ActivationCache {
    pub fn stop_layer(&self, num_layers: usize) -> usize {
        stop_layer(num_layers, self.depth)
    }

    pub fn cached_layers(&self) -> Vec<usize> {
        self.blocks.keys().copied().collect()
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        self.blocks.contains_key(&layer)
    }

    /// Drops one layer's entry; used to exercise the missing-cache error path.
    pub fn evict(&mut self, layer: usize) -> bool {
        self.blocks.remove(&layer).is_some()
    }
}

/// Result of the loss computation at the initiator.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub correct: usize,
    pub head: HeadGrads,
    /// Gradient with respect to the final transformer output (the head input).
    pub d_hidden: Tensor3,
}

pub fn embed(params: &ModelParams, batch: &Batch) -> Result<Tensor3, EngineError> {
    let spec = &params.spec;
    let n = spec.hidden_dim;
    if batch.seq_len != spec.seq_len {
        return Err(EngineError::ShapeMismatch {
            what: "sequence length",
            expected: spec.seq_len,
            got: batch.seq_len,
        });
    }
    let mut out = Tensor3::zeros(batch.batch_size(), batch.seq_len, n);
    let data = out.data_mut();
    for (pos, &tok) in batch.tokens.iter().enumerate() {
        let t = tok as usize;
        if t >= spec.vocab_size {
            return Err(EngineError::TokenOutOfRange {
                token: tok,
                vocab_size: spec.vocab_size,
            });
        }
        let s = pos % batch.seq_len;
        let row = &mut data[pos * n..(pos + 1) * n];
        let te = &params.token_embedding[t * n..(t + 1) * n];
        let pe = &params.position_embedding[s * n..(s + 1) * n];
        for i in 0..n {
            row[i] = te[i] + pe[i];
        }
    }
    Ok(out)
}

/// Runs blocks `layers` (1-based, with adapters), caching those at or above `cache_from`.
pub fn forward_layers(
    params: &ModelParams,
    x: Tensor3,
    layers: RangeInclusive<usize>,
    cache_from: usize,
) -> Result<(Tensor3, BTreeMap<usize, BlockCache>), EngineError> {
    let mut caches = BTreeMap::new();
    let mut h = x;
    for layer in layers {
        let keep = layer >= cache_from;
        let (out, cache) = block_forward(
            &h,
            params.block(layer),
            Some(params.adapter(layer)),
            params.activation,
            params.spec.num_heads,
            keep,
        )
        .map_err(|e| e.at_layer(layer))?;
        if let Some(c) = cache {
            caches.insert(layer, c);
        }
        h = out;
    }
    Ok((h, caches))
}

/// Mean-pool over positions followed by the linear head.
pub fn head_forward(head: &HeadParams, x: &Tensor3, classes: usize) -> (Logits, Vec<f64>) {
    let (b, s, n) = x.dims();
    let mut pooled = vec![0.0; b * n];
    for bi in 0..b {
        let p = &mut pooled[bi * n..(bi + 1) * n];
        for si in 0..s {
            let row = &x.data()[(bi * s + si) * n..(bi * s + si + 1) * n];
            for (pv, xv) in p.iter_mut().zip(row) {
                *pv += xv;
            }
        }
        p.iter_mut().for_each(|v| *v /= s as f64);
    }
    let values = linear(&pooled, b, &head.weight, Some(&head.bias), n, classes);
    (Logits { values, classes }, pooled)
}

/// Embedding, all `L` blocks and the head. Depth only decides which block
/// caches are retained (layers `>= L - depth + 1`); the values are identical
/// for every depth.
pub fn full_forward(
    params: &ModelParams,
    batch: &Batch,
    depth: usize,
) -> Result<(Logits, ActivationCache), EngineError> {
    let l = params.num_layers();
    check_depth(l, depth)?;
    let x = embed(params, batch)?;
    let dims = x.dims();
    let (h, blocks) = forward_layers(params, x, 1..=l, stop_layer(l, depth))?;
    let (logits, pooled) = head_forward(&params.head, &h, params.spec.num_classes);
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFiniteActivation { layer: Some(l + 1) });
    }
    Ok((
        logits,
        ActivationCache {
            batch_id: batch.id,
            version: params.version,
            depth,
            blocks,
            pooled,
            dims,
        },
    ))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<(f64, Vec<f64>), EngineError> {
    let c = logits.classes;
    let b = logits.batch();
    if labels.len() != b {
        return Err(EngineError::ShapeMismatch {
            what: "labels",
            expected: b,
            got: labels.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * c];
    for (i, (row, &y)) in logits.values.chunks(c).zip(labels).enumerate() {
        if y >= c {
            return Err(EngineError::LabelOutOfRange {
                label: y,
                num_classes: c,
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[y];
        for k in 0..c {
            let p = (row[k] - log_z).exp();
            grad[i * c + k] = (p - if k == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Loss at the initiator plus exact head gradients and the gradient flowing into the last block.
pub fn loss_and_head_grad(
    params: &ModelParams,
    cache: &ActivationCache,
    logits: &Logits,
    labels: &[usize],
) -> Result<LossOutput, EngineError> {
    head_loss_grad(&params.head, &cache.pooled, cache.dims, logits, labels)
}

/// [`loss_and_head_grad`] from the pooled head input alone; `dims` is
/// `(batch, seq, hidden)` of the last block's output.
pub fn head_loss_grad(
    head: &HeadParams,
    pooled: &[f64],
    dims: (usize, usize, usize),
    logits: &Logits,
    labels: &[usize],
) -> Result<LossOutput, EngineError> {
    let (b, s, n) = dims;
    let c = logits.classes;
    if pooled.len() != b * n {
        return Err(EngineError::ShapeMismatch {
            what: "pooled head input",
            expected: b * n,
            got: pooled.len(),
        });
    }
    let (loss, dlogits) = cross_entropy(logits, labels)?;
    let correct = logits
        .predictions()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let weight = linear_weight_grad(pooled, &dlogits, b, n, c);
    let mut bias = vec![0.0; c];
    for row in dlogits.chunks(c) {
        for (bv, g) in bias.iter_mut().zip(row) {
            *bv += g;
        }
    }
    let dpooled = linear_input_grad(&dlogits, b, &head.weight, n, c);
    let mut d_hidden = vec![0.0; b * s * n];
    for bi in 0..b {
        let g = &dpooled[bi * n..(bi + 1) * n];
        for si in 0..s {
            let row = &mut d_hidden[(bi * s + si) * n..(bi * s + si + 1) * n];
            for (r, gv) in row.iter_mut().zip(g) {
                *r = gv / s as f64;
            }
        }
    }
    Ok(LossOutput {
        loss,
        correct,
        head: HeadGrads { weight, bias },
        d_hidden: Tensor3::from_vec(b, s, n, d_hidden)?,
    })
}

/// Gradient below the lowest layer (if propagated) and per-layer adapter gradients.
pub type LayerBackward = (Option<Vec<f64>>, BTreeMap<usize, AdapterGrads>);

/// Backward through blocks `layers` from the top down, starting from `d_out` at the
/// output of the highest one. Adapter gradients are formed for every layer in the
/// range; the activation gradient is carried below `layers.start()` only when
/// `propagate_below` is set.
pub fn backward_layers(
    params: &ModelParams,
    caches: &BTreeMap<usize, BlockCache>,
    d_out: Vec<f64>,
    layers: RangeInclusive<usize>,
    propagate_below: bool,
) -> Result<LayerBackward, EngineError> {
    let lowest = *layers.start();
    let mut grads = BTreeMap::new();
    let mut d = Some(d_out);
    for layer in layers.rev() {
        let cache = caches
            .get(&layer)
            .ok_or(EngineError::MissingCache { layer: Some(layer) })?;
        let need_input = layer > lowest || propagate_below;
        let (dx, g) = block_backward(
            d.as_deref()
                .expect("gradient present above the lowest layer"),
            cache,
            params.block(layer),
            Some(params.adapter(layer)),
            params.activation,
            params.spec.num_heads,
            need_input,
        )
        .map_err(|e| e.at_layer(layer))?;
        grads.insert(
            layer,
            g.ok_or(EngineError::MissingCache { layer: Some(layer) })?,
        );
        d = dx;
    }
    Ok((d, grads))
}

/// Backward pass that stops at the lowest unfrozen adapter `L - depth + 1`.
/// Nothing below the stop layer is touched, and the frozen block weights never
/// receive gradients.
pub fn backward_early_stop(
    cache: &ActivationCache,
    loss: &LossOutput,
    params: &ModelParams,
    depth: usize,
) -> Result<GradientSet, EngineError> {
    let l = params.num_layers();
    check_depth(l, depth)?;
    let stop = stop_layer(l, depth);
    let (_, adapters) = backward_layers(
        params,
        &cache.blocks,
        loss.d_hidden.data().to_vec(),
        stop..=l,
        false,
    )?;
    Ok(GradientSet {
        version: cache.version,
        head: Some(loss.head.clone()),
        adapters,
    })
}

/// Reference backward: propagates through every block down to the embedding
/// output and forms every adapter gradient. Needs a depth-`L` cache.
pub fn full_backward_reference(
    cache: &ActivationCache,
    loss: &LossOutput,
    params: &ModelParams,
) -> Result<GradientSet, EngineError> {
    let l = params.num_layers();
    let (_, adapters) = backward_layers(
        params,
        &cache.blocks,
        loss.d_hidden.data().to_vec(),
        1..=l,
        true,
    )?;
    Ok(GradientSet {
        version: cache.version,
        head: Some(loss.head.clone()),
        adapters,
    })
}

fn sgd(p: &mut [f64], g: &[f64], lr: f64, what: &'static str) -> Result<(), EngineError> {
    if p.len() != g.len() {
        return Err(EngineError::ShapeMismatch {
            what,
            expected: p.len(),
            got: g.len(),
        });
    }
    for (pv, gv) in p.iter_mut().zip(g) {
        *pv -= lr * gv;
    }
    Ok(())
}

impl ModelParams {
    /// Plain gradient descent on the trainable groups. The gradients must have
    /// been computed against the current version.
    pub fn apply_update(
        &mut self,
        grads: &GradientSet,
        lr: f64,
        mask: &FreezeMask,
    ) -> Result<(), EngineError> {
        if grads.version != self.version {
            return Err(EngineError::StaleGradients {
                gradient_version: grads.version,
                params_version: self.version,
            });
        }
        self.apply_unchecked(grads, lr, mask)
    }

    /// Like [`ModelParams::apply_update`] but for gradients computed against a stashed
    /// older version (pipeline weight stashing).
    pub fn apply_stashed_update(
        &mut self,
        grads: &GradientSet,
        lr: f64,
        mask: &FreezeMask,
    ) -> Result<(), EngineError> {
        if grads.version > self.version {
            return Err(EngineError::StaleGradients {
                gradient_version: grads.version,
                params_version: self.version,
            });
        }
        self.apply_unchecked(grads, lr, mask)
    }

    fn apply_unchecked(
        &mut self,
        grads: &GradientSet,
        lr: f64,
        mask: &FreezeMask,
    ) -> Result<(), EngineError> {
        for &layer in grads.adapters.keys() {
            if !mask.adapter_trainable(layer) {
                return Err(EngineError::FrozenParameterTouched {
                    group: format!("adapter {layer}"),
                });
            }
        }
        if grads.head.is_some() && !mask.head_trainable() {
            return Err(EngineError::FrozenParameterTouched {
                group: "head".into(),
            });
        }
        for (&layer, g) in &grads.adapters {
            let a = &mut self.adapters[layer - 1];
            sgd(&mut a.down, &g.down, lr, "adapter W_down gradient")?;
            sgd(&mut a.up, &g.up, lr, "adapter W_up gradient")?;
        }
        if let Some(h) = &grads.head {
            sgd(&mut self.head.weight, &h.weight, lr, "head weight gradient")?;
            sgd(&mut self.head.bias, &h.bias, lr, "head bias gradient")?;
        }
        self.version += 1;
        Ok(())
    }
}
