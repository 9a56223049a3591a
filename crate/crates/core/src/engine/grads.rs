use std::collections::BTreeMap;

use crate::domain::{check_depth, stop_layer, DomainError};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub down: Vec<f64>,
    pub up: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for the trainable groups touched by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Version of the parameters the forward pass ran against.
    pub version: u64,
    pub head: Option<HeadGrads>,
    /// Keyed by 1-based layer.
    pub adapters: BTreeMap<usize, AdapterGrads>,
}

impl GradientSet {
    pub fn empty(version: u64) -> Self {
        Self {
            version,
            head: None,
            adapters: BTreeMap::new(),
        }
    }

    /// Keep only the groups the mask marks trainable.
    pub fn restrict(mut self, mask: &FreezeMask) -> Self {
        self.adapters.retain(|&l, _| mask.adapter_trainable(l));
        self
    }

    /// Keep only the adapters of layers in `begin..=end`, dropping the head.
    pub fn restrict_to_layers(&self, begin: usize, end: usize) -> Self {
        Self {
            version: self.version,
            head: None,
            adapters: self
                .adapters
                .range(begin..=end)
                .map(|(&l, g)| (l, g.clone()))
                .collect(),
        }
    }

    /// Largest absolute componentwise difference; `None` when the group sets differ.
    pub fn max_abs_diff(&self, other: &GradientSet) -> Option<f64> {
        if self.adapters.keys().ne(other.adapters.keys())
            || self.head.is_some() != other.head.is_some()
        {
            return None;
        }
        let mut worst = 0.0f64;
        let mut fold = |a: &[f64], b: &[f64]| {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        };
        for (l, g) in &self.adapters {
            let o = &other.adapters[l];
            fold(&g.down, &o.down);
            fold(&g.up, &o.up);
        }
        if let (Some(a), Some(b)) = (&self.head, &other.head) {
            fold(&a.weight, &b.weight);
            fold(&a.bias, &b.bias);
        }
        Some(worst)
    }
}

/// Which parameter groups may change: the head and the top `depth` adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeMask {
    num_layers: usize,
    depth: usize,
}

impl FreezeMask {
    pub fn new(num_layers: usize, depth: usize) -> Result<Self, DomainError> {
        check_depth(num_layers, depth)?;
        Ok(Self { num_layers, depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn stop_layer(&self) -> usize {
        stop_layer(self.num_layers, self.depth)
    }

    pub fn adapter_trainable(&self, layer: usize) -> bool {
        layer > self.num_layers - self.depth && layer <= self.num_layers
    }

    pub fn head_trainable(&self) -> bool {
        true
    }
}
