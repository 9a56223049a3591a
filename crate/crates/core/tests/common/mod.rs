#![allow(dead_code)]

use ringada_core::domain::{Cluster, CostModel, LMSpec, LayerAssignment, UnfreezeSchedule};
use ringada_core::engine::{Activation, InitOptions};
use ringada_core::trainer::{
    ConvergenceRule, DataConfig, Datasets, Setup, ToyTask, TrainingConfig,
};

pub fn spec() -> LMSpec {
    LMSpec {
        num_layers: 4,
        hidden_dim: 16,
        bottleneck_dim: 4,
        num_heads: 2,
        vocab_size: 32,
        seq_len: 8,
        num_classes: 2,
        scalar_bytes: 8,
    }
}

/// Non-trivial adapters so every trainable group carries gradient.
pub fn init() -> InitOptions {
    InitOptions {
        pretrained_std: 0.2,
        adapter_down_std: 0.3,
        adapter_up_std: 0.1,
        head_std: 0.1,
    }
}

pub fn data_config(seed: u64) -> DataConfig {
    DataConfig {
        task: ToyTask::CountThreshold,
        samples_per_device: 64,
        eval_samples_per_device: 32,
        designated_token: 0,
        max_count: 4,
        label_skew: 0.0,
        seed,
    }
}

/// `devices` uniform devices over the 4-layer toy model, one span each.
pub fn setup(
    devices: u32,
    sizes: &[usize],
    local_iterations: usize,
    rounds: usize,
) -> (Setup, Datasets) {
    let spec = spec();
    let cluster = Cluster::uniform(devices, 1.0, 1000.0, u64::MAX);
    let setup = Setup {
        spec: spec.clone(),
        activation: Activation::Relu,
        init: init(),
        assignment: LayerAssignment::from_sizes(&cluster.ids(), sizes).unwrap(),
        cost: CostModel::unit(1.0, 2.0, 500),
        training: TrainingConfig {
            local_iterations,
            batch_size: 4,
            learning_rate: 0.05,
            schedule: UnfreezeSchedule::top_down(spec.num_layers, 2),
            convergence: ConvergenceRule {
                window: 1,
                threshold: 0.0,
            },
            max_rounds: rounds,
            seed: 11,
            first_initiator: None,
        },
        cluster,
        single_device: None,
        record_events: false,
    };
    let data = Datasets::generate(&spec, &data_config(5), &setup.cluster.ids()).unwrap();
    (setup, data)
}
