use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::domain::LMSpec;

/// Nonlinearity inside the adapter bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_derivative(x),
        }
    }
}

// tanh approximation
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Dense layer `x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    fn gaussian(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: gaussian_vec(fan_in * fan_out, std, rng),
            bias: vec![0.0; fan_out],
            fan_in,
            fan_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn identity(n: usize) -> Self {
        Self {
            gain: vec![1.0; n],
            bias: vec![0.0; n],
        }
    }
}

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrmBlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_norm: LayerNorm,
}

/// Bottleneck adapter: `h + act(h W_down) W_up`, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `hidden x bottleneck`
    pub down: Vec<f64>,
    /// `bottleneck x hidden`
    pub up: Vec<f64>,
    pub hidden: usize,
    pub bottleneck: usize,
}

impl AdapterParams {
    pub fn new(
        hidden: usize,
        bottleneck: usize,
        down: Vec<f64>,
        up: Vec<f64>,
    ) -> Result<Self, EngineError> {
        if down.len() != hidden * bottleneck {
            return Err(EngineError::ShapeMismatch {
                what: "adapter W_down",
                expected: hidden * bottleneck,
                got: down.len(),
            });
        }
        if up.len() != hidden * bottleneck {
            return Err(EngineError::ShapeMismatch {
                what: "adapter W_up",
                expected: hidden * bottleneck,
                got: up.len(),
            });
        }
        Ok(Self {
            down,
            up,
            hidden,
            bottleneck,
        })
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// Linear classifier over the mean-pooled final representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `hidden x num_classes`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// Std of the stand-in "pre-trained" embedding and block weights.
    pub pretrained_std: f64,
    pub adapter_down_std: f64,
    /// Zero makes every adapter start as the identity.
    pub adapter_up_std: f64,
    pub head_std: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            pretrained_std: 0.02,
            adapter_down_std: 0.1,
            adapter_up_std: 0.0,
            head_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: LMSpec,
    pub activation: Activation,
    /// `vocab x hidden`, frozen.
    pub token_embedding: Vec<f64>,
    /// `seq x hidden`, frozen.
    pub position_embedding: Vec<f64>,
    pub blocks: Vec<TrmBlockParams>,
    pub adapters: Vec<AdapterParams>,
    pub head: HeadParams,
    /// Number of updates applied so far.
    pub version: u64,
}

impl ModelParams {
    pub fn init(
        spec: &LMSpec,
        activation: Activation,
        opts: &InitOptions,
        seed: u64,
    ) -> Result<Self, EngineError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.hidden_dim;
        let m = spec.bottleneck_dim;
        let f = spec.ffn_dim();
        let std = opts.pretrained_std;
        let token_embedding = gaussian_vec(spec.vocab_size * n, std, &mut rng);
        let position_embedding = gaussian_vec(spec.seq_len * n, std, &mut rng);
        let blocks = (0..spec.num_layers)
            .map(|_| TrmBlockParams {
                query: Linear::gaussian(n, n, std, &mut rng),
                key: Linear::gaussian(n, n, std, &mut rng),
                value: Linear::gaussian(n, n, std, &mut rng),
                output: Linear::gaussian(n, n, std, &mut rng),
                ffn_in: Linear::gaussian(n, f, std, &mut rng),
                ffn_out: Linear::gaussian(f, n, std, &mut rng),
                attn_norm: LayerNorm::identity(n),
                ffn_norm: LayerNorm::identity(n),
            })
            .collect();
        let adapters = (0..spec.num_layers)
            .map(|_| AdapterParams {
                down: gaussian_vec(n * m, opts.adapter_down_std, &mut rng),
                up: gaussian_vec(m * n, opts.adapter_up_std, &mut rng),
                hidden: n,
                bottleneck: m,
            })
            .collect();
        let head = HeadParams {
            weight: gaussian_vec(n * spec.num_classes, opts.head_std, &mut rng),
            bias: vec![0.0; spec.num_classes],
        };
        Ok(Self {
            spec: spec.clone(),
            activation,
            token_embedding,
            position_embedding,
            blocks,
            adapters,
            head,
            version: 0,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    /// Adapter of 1-based layer `layer`.
    pub fn adapter(&self, layer: usize) -> &AdapterParams {
        &self.adapters[layer - 1]
    }

    pub fn block(&self, layer: usize) -> &TrmBlockParams {
        &self.blocks[layer - 1]
    }
}

fn gaussian_vec(len: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..len).map(|_| normal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn init_is_deterministic_and_adapters_start_as_identity() {
        let spec = LMSpec {
            num_layers: 2,
            hidden_dim: 8,
            bottleneck_dim: 2,
            num_heads: 2,
            vocab_size: 10,
            seq_len: 4,
            num_classes: 3,
            scalar_bytes: 4,
        };
        let a = ModelParams::init(&spec, Activation::Relu, &InitOptions::default(), 5).unwrap();
        let b = ModelParams::init(&spec, Activation::Relu, &InitOptions::default(), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.adapters.iter().all(|ad| ad.up.iter().all(|&v| v == 0.0)));
        let total = a.token_embedding.len()
            + a.position_embedding.len()
            + a.blocks.len() * spec.block_param_count()
            + a.adapters
                .iter()
                .map(AdapterParams::param_count)
                .sum::<usize>()
            + a.head.weight.len()
            + a.head.bias.len();
        assert_eq!(total, spec.total_param_count());
    }
}
