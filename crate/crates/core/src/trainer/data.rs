use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DeviceId, LMSpec};
use crate::engine::Batch;

use super::TrainerError;

/// Synthetic sequence-classification tasks over a designated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    /// Label is the parity of the designated token's count.
    #[default]
    Parity,
    /// Label is 1 when the designated token appears at least `max_count / 2 + 1` times.
    CountThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub task: ToyTask,
    pub samples_per_device: usize,
    pub eval_samples_per_device: usize,
    #[serde(default)]
    pub designated_token: u32,
    /// Largest number of designated-token occurrences in a sequence.
    pub max_count: usize,
    /// 0 is IID; 1 gives every device a single label.
    #[serde(default)]
    pub label_skew: f64,
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self, spec: &LMSpec) -> Result<(), TrainerError> {
        let bad = |m: String| Err(TrainerError::InvalidConfig(m));
        if spec.num_classes != 2 {
            return bad(format!(
                "toy tasks are binary, spec has {} classes",
                spec.num_classes
            ));
        }
        if self.samples_per_device == 0 || self.eval_samples_per_device == 0 {
            return bad("datasets must be non-empty".into());
        }
        if self.designated_token as usize >= spec.vocab_size || spec.vocab_size < 2 {
            return bad(format!(
                "designated token {} outside vocabulary",
                self.designated_token
            ));
        }
        if self.max_count < 2 || self.max_count > spec.seq_len {
            return bad(format!(
                "max_count must lie in [2, seq_len], got {}",
                self.max_count
            ));
        }
        if !(0.0..=1.0).contains(&self.label_skew) {
            return bad(format!(
                "label_skew must lie in [0, 1], got {}",
                self.label_skew
            ));
        }
        Ok(())
    }
}

/// Local samples of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub device: DeviceId,
    pub seq_len: usize,
    /// `len x seq_len`, row-major.
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[u32], usize) {
        (
            &self.tokens[i * self.seq_len..(i + 1) * self.seq_len],
            self.labels[i],
        )
    }

    pub fn batch(&self, id: u64, rows: &[usize]) -> Result<Batch, TrainerError> {
        let mut tokens = Vec::with_capacity(rows.len() * self.seq_len);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            let (t, y) = self.sample(r);
            tokens.extend_from_slice(t);
            labels.push(y);
        }
        Ok(Batch::new(id, tokens, labels, self.seq_len)?)
    }
}

/// Train and held-out splits for every device.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: BTreeMap<DeviceId, ClientDataset>,
    pub eval: BTreeMap<DeviceId, ClientDataset>,
}

/// SplitMix64 finaliser, for deriving independent stream seeds.
pub(crate) fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
pub(crate) const SAMPLER_STREAM: u64 = 3;

impl Datasets {
    pub fn generate(
        spec: &LMSpec,
        cfg: &DataConfig,
        devices: &[DeviceId],
    ) -> Result<Self, TrainerError> {
        cfg.validate(spec)?;
        let mut train = BTreeMap::new();
        let mut eval = BTreeMap::new();
        for (i, &d) in devices.iter().enumerate() {
            let favoured = i % spec.num_classes;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TRAIN_STREAM, d.0 as u64));
            train.insert(
                d,
                generate_client(spec, cfg, d, cfg.samples_per_device, favoured, &mut rng),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EVAL_STREAM, d.0 as u64));
            eval.insert(
                d,
                generate_client(
                    spec,
                    cfg,
                    d,
                    cfg.eval_samples_per_device,
                    favoured,
                    &mut rng,
                ),
            );
        }
        Ok(Self { train, eval })
    }
}

fn generate_client(
    spec: &LMSpec,
    cfg: &DataConfig,
    device: DeviceId,
    n: usize,
    favoured: usize,
    rng: &mut ChaCha8Rng,
) -> ClientDataset {
    let s = spec.seq_len;
    let tok = cfg.designated_token;
    let threshold = cfg.max_count / 2 + 1;
    let mut tokens = Vec::with_capacity(n * s);
    let mut labels = Vec::with_capacity(n);
    let positions: Vec<usize> = (0..s).collect();
    for _ in 0..n {
        let label = if rng.random::<f64>() < cfg.label_skew {
            favoured
        } else {
            rng.random_range(0..2)
        };
        let counts: Vec<usize> = (0..=cfg.max_count)
            .filter(|&c| match cfg.task {
                ToyTask::Parity => c % 2 == label,
                ToyTask::CountThreshold => (c >= threshold) == (label == 1),
            })
            .collect();
        let count = counts[rng.random_range(0..counts.len())];
        let mut row: Vec<u32> = (0..s)
            .map(|_| {
                let t = rng.random_range(0..spec.vocab_size as u32 - 1);
                if t >= tok {
                    t + 1
                } else {
                    t
                }
            })
            .collect();
        for &p in positions.choose_multiple(rng, count) {
            row[p] = tok;
        }
        tokens.extend(row);
        labels.push(label);
    }
    ClientDataset {
        device,
        seq_len: s,
        tokens,
        labels,
    }
}

/// Shuffled passes over one device's samples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_rows(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// A batch together with the device whose labels it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedBatch {
    pub owner: DeviceId,
    pub batch: Batch,
}

/// Deterministic per-device mini-batch streams with globally increasing ids.
#[derive(Debug, Clone)]
pub struct BatchStream {
    samplers: BTreeMap<DeviceId, BatchSampler>,
    batch_size: usize,
    next_id: u64,
}

impl BatchStream {
    pub fn new(data: &Datasets, batch_size: usize, seed: u64) -> Self {
        let samplers = data
            .train
            .iter()
            .map(|(&d, ds)| {
                (
                    d,
                    BatchSampler::new(ds.len(), derive_seed(seed, SAMPLER_STREAM, d.0 as u64)),
                )
            })
            .collect();
        Self {
            samplers,
            batch_size,
            next_id: 0,
        }
    }

    pub fn next_batch(
        &mut self,
        data: &Datasets,
        owner: DeviceId,
    ) -> Result<OwnedBatch, TrainerError> {
        let ds = data
            .train
            .get(&owner)
            .ok_or(TrainerError::MissingData(owner))?;
        let sampler = self
            .samplers
            .get_mut(&owner)
            .ok_or(TrainerError::MissingData(owner))?;
        let rows = sampler.next_rows(self.batch_size);
        let batch = ds.batch(self.next_id, &rows)?;
        self.next_id += 1;
        Ok(OwnedBatch { owner, batch })
    }

    pub fn issued(&self) -> u64 {
        self.next_id
    }
}
