use ringada_core::domain::{Cluster, DeviceId, DomainError, LMSpec, LayerAssignment};
use ringada_core::sim::static_weight_bytes;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("device {device} needs {needed} bytes for its weights but has a budget of {budget}")]
    InfeasibleMemory {
        device: DeviceId,
        needed: u64,
        budget: u64,
    },
    #[error("cannot split {layers} layers over {devices} devices")]
    TooFewLayers { layers: usize, devices: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Span sizes proportional to compute speed, by largest remainder with ties
/// to the lower device id; every device gets at least one layer.
pub fn proportional_sizes(speeds: &[f64], layers: usize) -> Vec<usize> {
    let total: f64 = speeds.iter().sum();
    let quotas: Vec<f64> = speeds.iter().map(|s| layers as f64 * s / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q.floor() as usize).max(1)).collect();
    let rem = |i: usize| quotas[i] - quotas[i].floor();
    let mut assigned: usize = sizes.iter().sum();
    // Hand out missing layers by largest remainder, lower index first on ties.
    let mut by_rem: Vec<usize> = (0..speeds.len()).collect();
    by_rem.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    let mut k = 0;
    while assigned < layers {
        sizes[by_rem[k % by_rem.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    // Minimum-one bumps can overshoot; take back from the most over-served.
    while assigned > layers {
        let i = (0..sizes.len())
            .filter(|&i| sizes[i] > 1)
            .max_by(|&a, &b| {
                (sizes[a] as f64 - quotas[a])
                    .total_cmp(&(sizes[b] as f64 - quotas[b]))
                    .then(b.cmp(&a))
            })
            .expect("layers >= devices leaves a span above one");
        sizes[i] -= 1;
        assigned -= 1;
    }
    sizes
}

/// Contiguous spans in ascending device-id order, checked against each
/// device's memory budget for its static weights.
pub fn plan_assignment(cluster: &Cluster, spec: &LMSpec) -> Result<LayerAssignment, PlanError> {
    let ids = cluster.ids();
    if spec.num_layers < ids.len() {
        return Err(PlanError::TooFewLayers {
            layers: spec.num_layers,
            devices: ids.len(),
        });
    }
    let speeds: Vec<f64> = cluster.profiles().map(|p| p.compute_speed).collect();
    let sizes = proportional_sizes(&speeds, spec.num_layers);
    for (p, &n) in cluster.profiles().zip(&sizes) {
        let needed = static_weight_bytes(spec, n);
        if needed > p.memory_budget {
            return Err(PlanError::InfeasibleMemory {
                device: p.device_id,
                needed,
                budget: p.memory_budget,
            });
        }
    }
    Ok(LayerAssignment::from_sizes(&ids, &sizes)?)
}
