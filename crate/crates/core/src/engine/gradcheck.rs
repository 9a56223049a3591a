//! Central finite differences over the trainable scalars, as an oracle for the
//! hand-written backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grads::{FreezeMask, GradientSet};
use super::model::{backward_early_stop, cross_entropy, full_forward, loss_and_head_grad, Batch};
use super::params::ModelParams;
use super::EngineError;

/// Above this many trainable scalars a seeded random subset is checked.
pub const MAX_CHECKED_SCALARS: usize = 10_000;
const SUBSAMPLE_SEED: u64 = 0x6772_6164;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    Down(usize, usize),
    Up(usize, usize),
    HeadWeight(usize),
    HeadBias(usize),
}

impl Scalar {
    fn slot<'a>(&self, p: &'a mut ModelParams) -> &'a mut f64 {
        match *self {
            Scalar::Down(l, i) => &mut p.adapters[l - 1].down[i],
            Scalar::Up(l, i) => &mut p.adapters[l - 1].up[i],
            Scalar::HeadWeight(i) => &mut p.head.weight[i],
            Scalar::HeadBias(i) => &mut p.head.bias[i],
        }
    }

    fn analytic(&self, g: &GradientSet) -> f64 {
        let head = g.head.as_ref();
        match *self {
            Scalar::Down(l, i) => g.adapters.get(&l).map_or(0.0, |a| a.down[i]),
            Scalar::Up(l, i) => g.adapters.get(&l).map_or(0.0, |a| a.up[i]),
            Scalar::HeadWeight(i) => head.map_or(0.0, |h| h.weight[i]),
            Scalar::HeadBias(i) => head.map_or(0.0, |h| h.bias[i]),
        }
    }
}

fn trainable_scalars(params: &ModelParams, mask: &FreezeMask) -> Vec<Scalar> {
    let mut out = Vec::new();
    for l in mask.stop_layer()..=params.num_layers() {
        let a = params.adapter(l);
        out.extend((0..a.down.len()).map(|i| Scalar::Down(l, i)));
        out.extend((0..a.up.len()).map(|i| Scalar::Up(l, i)));
    }
    out.extend((0..params.head.weight.len()).map(Scalar::HeadWeight));
    out.extend((0..params.head.bias.len()).map(Scalar::HeadBias));
    out
}

/// Gradients from the engine's own forward and early-stopped backward.
pub fn analytic_gradients(
    params: &ModelParams,
    batch: &Batch,
    depth: usize,
) -> Result<GradientSet, EngineError> {
    let (logits, cache) = full_forward(params, batch, depth)?;
    let loss = loss_and_head_grad(params, &cache, &logits, &batch.labels)?;
    backward_early_stop(&cache, &loss, params, depth)
}

fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64, EngineError> {
    let (logits, _) = full_forward(params, batch, 1)?;
    Ok(cross_entropy(&logits, &batch.labels)?.0)
}

/// Largest relative error between analytic and central-difference gradients,
/// with denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check(
    params: &ModelParams,
    batch: &Batch,
    depth: usize,
    epsilon: f64,
) -> Result<f64, EngineError> {
    finite_difference_check_with(params, batch, depth, epsilon, analytic_gradients)
}

/// [`finite_difference_check`] against an arbitrary gradient routine.
pub fn finite_difference_check_with<F>(
    params: &ModelParams,
    batch: &Batch,
    depth: usize,
    epsilon: f64,
    gradients: F,
) -> Result<f64, EngineError>
where
    F: Fn(&ModelParams, &Batch, usize) -> Result<GradientSet, EngineError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mask = FreezeMask::new(params.num_layers(), depth)?;
    let analytic = gradients(params, batch, depth)?;
    let mut scalars = trainable_scalars(params, &mask);
    if scalars.len() > MAX_CHECKED_SCALARS {
        let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
        let mut picked = sample(&mut rng, scalars.len(), MAX_CHECKED_SCALARS).into_vec();
        picked.sort_unstable();
        scalars = picked.into_iter().map(|i| scalars[i]).collect();
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for s in scalars {
        let orig = *s.slot(&mut probe);
        *s.slot(&mut probe) = orig + epsilon;
        let plus = batch_loss(&probe, batch)?;
        *s.slot(&mut probe) = orig - epsilon;
        let minus = batch_loss(&probe, batch)?;
        *s.slot(&mut probe) = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = s.analytic(&analytic);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LMSpec;
    use crate::engine::params::{Activation, InitOptions};

    fn toy(seed: u64) -> (ModelParams, Batch) {
        let spec = LMSpec {
            num_layers: 4,
            hidden_dim: 16,
            bottleneck_dim: 4,
            num_heads: 2,
            vocab_size: 32,
            seq_len: 8,
            num_classes: 2,
            scalar_bytes: 8,
        };
        let opts = InitOptions {
            pretrained_std: 0.2,
            adapter_down_std: 0.3,
            adapter_up_std: 0.3,
            head_std: 0.3,
        };
        let p = ModelParams::init(&spec, Activation::Relu, &opts, seed).unwrap();
        let tokens = (0..16u32).map(|i| (i * 7 + seed as u32) % 32).collect();
        (p, Batch::new(0, tokens, vec![0, 1], 8).unwrap())
    }

    #[test]
    fn passes_at_both_extremes() {
        let (p, b) = toy(1);
        for depth in [1, 4] {
            let err = finite_difference_check(&p, &b, depth, 1e-4).unwrap();
            assert!(err <= 1e-5, "depth {depth}: {err}");
        }
    }

    #[test]
    fn sign_flip_in_adapter_backward_is_caught() {
        let (p, b) = toy(1);
        let err = finite_difference_check_with(&p, &b, 2, 1e-4, |p, b, d| {
            let mut g = analytic_gradients(p, b, d)?;
            for a in g.adapters.values_mut() {
                a.down.iter_mut().for_each(|v| *v = -*v);
            }
            Ok(g)
        })
        .unwrap();
        assert!(err > 1e-5);
    }

    #[test]
    fn dead_relu_gives_exactly_zero_up_gradients() {
        let (mut p, mut b) = toy(2);
        b.tokens.iter_mut().for_each(|t| *t = 0);
        for a in &mut p.adapters {
            a.down.iter_mut().for_each(|v| *v = 0.0);
        }
        let g = analytic_gradients(&p, &b, 4).unwrap();
        for a in g.adapters.values() {
            assert!(a.up.iter().all(|&v| v == 0.0));
        }
    }
}
