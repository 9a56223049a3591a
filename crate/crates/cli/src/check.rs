//! Self-check suite: gradient, early-stop, schedule and equivalence checks
//! that gate a build before any experiment is trusted.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringada_core::baselines::{run_ringada, run_single};
use ringada_core::domain::{
    Cluster, CostModel, DeviceId, DeviceProfile, LMSpec, LayerAssignment, PhaseTimes,
    UnfreezeSchedule,
};
use ringada_core::engine::{
    backward_early_stop, finite_difference_check, full_backward_reference, full_forward,
    loss_and_head_grad, Activation, Batch, FreezeMask, InitOptions, ModelParams,
};
use ringada_core::sim::{simulate_pipeline_with, validate_schedule, PipelinePolicy};
use ringada_core::trainer::{
    ConvergenceRule, DataConfig, Datasets, Setup, ToyTask, TrainingConfig,
};

pub const FD_TOLERANCE: f64 = 1e-5;
pub const EXACT_TOLERANCE: f64 = 1e-12;
pub const ORACLE_PAIRS: usize = 50;
pub const FUZZ_CONFIGS: usize = 200;
pub const EQUIVALENCE_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub seed: u64,
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "self-check (seed {})", self.seed)?;
        for o in &self.outcomes {
            writeln!(f, "{o}")?;
        }
        Ok(())
    }
}

/// The small model every check runs on: L=4, n=16, m=4, S=8.
pub fn toy_spec() -> LMSpec {
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

/// Init loud enough that every adapter and the head carry real signal.
pub fn toy_init() -> InitOptions {
    InitOptions {
        pretrained_std: 0.2,
        adapter_down_std: 0.3,
        adapter_up_std: 0.3,
        head_std: 0.3,
    }
}

pub fn random_batch(spec: &LMSpec, rows: usize, rng: &mut impl Rng) -> Batch {
    let tokens = (0..rows * spec.seq_len)
        .map(|_| rng.random_range(0..spec.vocab_size as u32))
        .collect();
    let labels = (0..rows)
        .map(|_| rng.random_range(0..spec.num_classes))
        .collect();
    Batch::new(0, tokens, labels, spec.seq_len).expect("shapes follow the spec")
}

fn toy_params(seed: u64) -> ModelParams {
    ModelParams::init(&toy_spec(), Activation::Relu, &toy_init(), seed).expect("toy spec is valid")
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

/// Largest finite-difference relative error over depths 1, 2 and L with B=2.
pub fn gradient_check(seed: u64) -> CheckOutcome {
    let spec = toy_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = toy_params(seed);
    let batch = random_batch(&spec, 2, &mut rng);
    let mut worst = 0.0f64;
    for depth in [1, 2, spec.num_layers] {
        match finite_difference_check(&params, &batch, depth, 1e-4) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return outcome("gradient", false, format!("depth {depth}: {e}")),
        }
    }
    outcome(
        "gradient",
        worst <= FD_TOLERANCE,
        format!("max relative error {worst:.3e} (limit {FD_TOLERANCE:.0e})"),
    )
}

/// Largest componentwise gap between the early-stopped backward and the
/// masked full backward over `pairs` random (seed, depth) draws.
pub fn early_stop_max_gap(seed: u64, pairs: usize) -> Result<f64, String> {
    let spec = toy_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let params = toy_params(rng.random());
        let depth = rng.random_range(1..=spec.num_layers);
        let batch = random_batch(&spec, 2, &mut rng);
        let mask = FreezeMask::new(spec.num_layers, depth).map_err(|e| e.to_string())?;
        let gap = (|| {
            let (logits, cache) = full_forward(&params, &batch, spec.num_layers)?;
            let loss = loss_and_head_grad(&params, &cache, &logits, &batch.labels)?;
            let fast = backward_early_stop(&cache, &loss, &params, depth)?;
            let oracle = full_backward_reference(&cache, &loss, &params)?.restrict(&mask);
            Ok::<_, ringada_core::engine::EngineError>(fast.max_abs_diff(&oracle))
        })()
        .map_err(|e| e.to_string())?;
        worst = worst.max(gap.ok_or_else(|| format!("trainable sets differ at depth {depth}"))?);
    }
    Ok(worst)
}

pub fn early_stop_check(seed: u64) -> CheckOutcome {
    match early_stop_max_gap(seed, ORACLE_PAIRS) {
        Ok(gap) => outcome(
            "early-stop oracle",
            gap <= EXACT_TOLERANCE,
            format!("{ORACLE_PAIRS} pairs, max gap {gap:.3e} (limit {EXACT_TOLERANCE:.0e})"),
        ),
        Err(e) => outcome("early-stop oracle", false, e),
    }
}

/// One random simulator scenario: 1-8 devices, spans 1-4, 1-16 batches.
#[derive(Debug, Clone)]
pub struct FuzzCase {
    pub assignment: LayerAssignment,
    pub cluster: Cluster,
    pub cost: CostModel,
    pub depth: usize,
    pub initiator: DeviceId,
    pub batches: usize,
    pub window: usize,
}

pub fn fuzz_case(rng: &mut impl Rng) -> FuzzCase {
    let u = rng.random_range(1..=8u32);
    let ids: Vec<DeviceId> = (1..=u).map(DeviceId).collect();
    let sizes: Vec<usize> = ids.iter().map(|_| rng.random_range(1..=4)).collect();
    let layers: usize = sizes.iter().sum();
    let profiles = ids
        .iter()
        .map(|&d| DeviceProfile {
            device_id: d,
            compute_speed: rng.random_range(0.25..4.0),
            memory_budget: u64::MAX,
            link_rates: ids
                .iter()
                .filter(|&&p| p != d)
                .map(|&p| (p, rng.random_range(0.5..50.0)))
                .collect(),
        })
        .collect();
    let mut times = || PhaseTimes {
        emb: rng.random_range(0.05..3.0),
        trm: rng.random_range(0.05..3.0),
        trm_with_adapter: rng.random_range(0.05..3.0),
        hed: rng.random_range(0.05..3.0),
    };
    let (fw_time, bw_time) = (times(), times());
    let bytes = rng.random_range(1..200);
    FuzzCase {
        assignment: LayerAssignment::from_sizes(&ids, &sizes).expect("sizes are positive"),
        cluster: Cluster::new(profiles).expect("rates and speeds are positive"),
        cost: CostModel {
            fw_time,
            bw_time,
            activation_msg_bytes: bytes,
            gradient_msg_bytes: bytes,
            head_params_bytes: bytes,
        },
        depth: rng.random_range(1..=layers),
        initiator: ids[rng.random_range(0..ids.len())],
        batches: rng.random_range(1..=16),
        // Ring schedules are the common case; the rest exercise stashing.
        window: if rng.random_bool(0.5) {
            1
        } else {
            rng.random_range(1..=u as usize)
        },
    }
}

/// Simulates `configs` random scenarios and counts validator violations.
pub fn fuzz_violations(seed: u64, configs: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let mut total = 0;
    for i in 0..configs {
        let c = fuzz_case(&mut rng);
        let log = simulate_pipeline_with(
            &c.assignment,
            &c.cost,
            &c.cluster,
            c.depth,
            c.initiator,
            c.batches,
            PipelinePolicy::stashed(c.window),
        )
        .map_err(|e| format!("config {i}: {e}"))?;
        total += validate_schedule(&log, &c.assignment, c.depth).len();
    }
    Ok(total)
}

pub fn fuzz_check(seed: u64) -> CheckOutcome {
    match fuzz_violations(seed, FUZZ_CONFIGS) {
        Ok(n) => outcome(
            "schedule fuzz",
            n == 0,
            format!("{FUZZ_CONFIGS} configs, {n} violations"),
        ),
        Err(e) => outcome("schedule fuzz", false, e),
    }
}

/// Two devices, full depth throughout, `iterations` batches in total.
pub fn equivalence_setup(seed: u64, iterations: usize) -> (Setup, Datasets) {
    let spec = toy_spec();
    let cluster = Cluster::uniform(2, 1.0, 100.0, u64::MAX);
    let local = 10;
    let setup = Setup {
        spec: spec.clone(),
        activation: Activation::Relu,
        init: toy_init(),
        assignment: LayerAssignment::from_sizes(&cluster.ids(), &[2, 2])
            .expect("4 layers over 2 devices"),
        cost: CostModel::unit(1.0, 2.0, 64),
        training: TrainingConfig {
            local_iterations: local,
            batch_size: 4,
            learning_rate: 0.05,
            schedule: UnfreezeSchedule::fixed(spec.num_layers),
            convergence: ConvergenceRule {
                window: 1,
                threshold: 0.0,
            },
            max_rounds: iterations.div_ceil(local * cluster.len()),
            seed,
            first_initiator: None,
        },
        cluster,
        single_device: None,
        record_events: false,
    };
    let data_cfg = DataConfig {
        task: ToyTask::CountThreshold,
        samples_per_device: 64,
        eval_samples_per_device: 16,
        designated_token: 1,
        max_count: 4,
        label_skew: 0.0,
        seed,
    };
    let data = Datasets::generate(&spec, &data_cfg, &setup.cluster.ids())
        .expect("toy data config is valid");
    (setup, data)
}

/// Largest per-iteration loss gap between RingAda at full depth and Single.
pub fn equivalence_gap(seed: u64, iterations: usize) -> Result<(usize, f64), String> {
    let (setup, data) = equivalence_setup(seed, iterations);
    let params = setup.initial_params().map_err(|e| e.to_string())?;
    let (_, ring) = run_ringada(params.clone(), &data, &setup).map_err(|e| e.to_string())?;
    let (_, single) = run_single(params, &data, &setup).map_err(|e| e.to_string())?;
    if ring.iterations.len() != single.iterations.len() {
        return Err(format!(
            "{} vs {} iterations",
            ring.iterations.len(),
            single.iterations.len()
        ));
    }
    let gap = ring
        .iterations
        .iter()
        .zip(&single.iterations)
        .map(|(a, b)| (a.loss - b.loss).abs())
        .fold(0.0, f64::max);
    Ok((ring.iterations.len(), gap))
}

pub fn equivalence_check(seed: u64) -> CheckOutcome {
    match equivalence_gap(seed, EQUIVALENCE_ITERATIONS) {
        Ok((n, gap)) => outcome(
            "ring/single equivalence",
            n >= EQUIVALENCE_ITERATIONS && gap <= EXACT_TOLERANCE,
            format!("{n} iterations, max loss gap {gap:.3e}"),
        ),
        Err(e) => outcome("ring/single equivalence", false, e),
    }
}

pub fn self_check(seed: u64) -> CheckReport {
    CheckReport {
        seed,
        outcomes: vec![
            gradient_check(seed),
            early_stop_check(seed),
            fuzz_check(seed),
            equivalence_check(seed),
        ],
    }
}
