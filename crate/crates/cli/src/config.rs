//! Experiment configuration: one TOML document, see `configs/reference.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ringada_core::baselines::SchemeKind;
use ringada_core::domain::{
    Cluster, CostModel, DeviceId, DeviceProfile, LMSpec, LayerAssignment, PhaseTimes,
    UnfreezeSchedule,
};
use ringada_core::engine::{Activation, InitOptions};
use ringada_core::trainer::{ConvergenceRule, DataConfig, Datasets, Setup, TrainingConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{plan_assignment, PlanError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("at `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub scalar_bytes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init: Option<InitOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub id: u32,
    pub compute_speed: f64,
    pub memory_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub from: u32,
    pub to: u32,
    /// Bytes per second.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Rate of every directed link not listed in `links`, in bytes per second.
    pub default_rate: f64,
    #[serde(default)]
    pub links: Vec<LinkSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub fw_time: PhaseTimes,
    pub bw_time: PhaseTimes,
    /// Derived from the model and batch size when absent.
    #[serde(default)]
    pub activation_msg_bytes: Option<u64>,
    #[serde(default)]
    pub gradient_msg_bytes: Option<u64>,
    #[serde(default)]
    pub head_params_bytes: Option<u64>,
}

/// `"auto"` or explicit span sizes in device-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AssignmentSection {
    Auto(AutoTag),
    Sizes(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_rounds: usize,
    #[serde(default)]
    pub convergence: ConvergenceRule,
    #[serde(default)]
    pub first_initiator: Option<u32>,
    #[serde(default)]
    pub single_device: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds parameter initialisation and mini-batch sampling.
    pub seed: u64,
    #[serde(default = "all_schemes")]
    pub schemes: Vec<SchemeKind>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write `events.log` per scheme.
    #[serde(default)]
    pub event_log: bool,
    pub model: ModelSection,
    pub devices: Vec<DeviceSection>,
    pub network: NetworkSection,
    pub cost: CostSection,
    pub assignment: AssignmentSection,
    pub schedule: UnfreezeSchedule,
    pub training: TrainingSection,
    pub data: DataConfig,
}

fn all_schemes() -> Vec<SchemeKind> {
    SchemeKind::ALL.to_vec()
}

/// Everything a run needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub setup: Setup,
    pub data: Datasets,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let message = e.inner().message().to_string();
            let mut path = e.path().to_string();
            // Missing keys are reported at their parent table; name the key itself.
            if let Some(field) = message
                .strip_prefix("missing field `")
                .and_then(|m| m.strip_suffix('`'))
            {
                path = if path == "." {
                    field.to_string()
                } else {
                    format!("{path}.{field}")
                };
            }
            ConfigError::Field { path, message }
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(cfg.schema_version));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn spec(&self) -> LMSpec {
        let m = &self.model;
        LMSpec {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            bottleneck_dim: m.bottleneck_dim,
            num_heads: m.num_heads,
            vocab_size: m.vocab_size,
            seq_len: m.seq_len,
            num_classes: m.num_classes,
            scalar_bytes: m.scalar_bytes,
        }
    }

    pub fn cluster(&self) -> Result<Cluster, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if self.devices.is_empty() {
            return Err(invalid("at least one device is required".into()));
        }
        let mut overrides: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for l in &self.network.links {
            if overrides.insert((l.from, l.to), l.rate).is_some() {
                return Err(invalid(format!("link u{}->u{} listed twice", l.from, l.to)));
            }
            for id in [l.from, l.to] {
                if !self.devices.iter().any(|d| d.id == id) {
                    return Err(invalid(format!("link names unknown device u{id}")));
                }
            }
        }
        let profiles = self
            .devices
            .iter()
            .map(|d| DeviceProfile {
                device_id: DeviceId(d.id),
                compute_speed: d.compute_speed,
                memory_budget: d.memory_budget,
                link_rates: self
                    .devices
                    .iter()
                    .filter(|p| p.id != d.id)
                    .map(|p| {
                        let rate = overrides
                            .get(&(d.id, p.id))
                            .copied()
                            .unwrap_or(self.network.default_rate);
                        (DeviceId(p.id), rate)
                    })
                    .collect(),
            })
            .collect();
        Cluster::new(profiles).map_err(|e| invalid(e.to_string()))
    }

    pub fn cost_model(&self) -> CostModel {
        let spec = self.spec();
        let boundary = spec.activation_bytes(self.training.batch_size);
        let c = &self.cost;
        CostModel {
            fw_time: c.fw_time,
            bw_time: c.bw_time,
            activation_msg_bytes: c.activation_msg_bytes.unwrap_or(boundary),
            gradient_msg_bytes: c.gradient_msg_bytes.unwrap_or(boundary),
            head_params_bytes: c
                .head_params_bytes
                .unwrap_or((spec.head_param_count() * spec.scalar_bytes) as u64),
        }
    }

    pub fn layer_assignment(&self, cluster: &Cluster) -> Result<LayerAssignment, ConfigError> {
        let spec = self.spec();
        match &self.assignment {
            AssignmentSection::Auto(_) => Ok(plan_assignment(cluster, &spec)?),
            AssignmentSection::Sizes(sizes) => {
                let ids = cluster.ids();
                if sizes.len() != ids.len() {
                    return Err(ConfigError::Invalid(format!(
                        "assignment lists {} spans for {} devices",
                        sizes.len(),
                        ids.len()
                    )));
                }
                LayerAssignment::from_sizes(&ids, sizes)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            local_iterations: t.local_iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            schedule: self.schedule,
            convergence: t.convergence,
            max_rounds: t.max_rounds,
            seed: self.seed,
            first_initiator: t.first_initiator.map(DeviceId),
        }
    }

    /// Validate everything and build the run inputs, including the datasets.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        if self.schemes.is_empty() {
            return Err(ConfigError::Invalid("scheme list is empty".into()));
        }
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let spec = self.spec();
        spec.validate().map_err(|e| invalid(&e))?;
        let cluster = self.cluster()?;
        let assignment = self.layer_assignment(&cluster)?;
        let setup = Setup {
            spec: spec.clone(),
            activation: self.model.activation,
            init: self.model.init.unwrap_or_default(),
            cluster: cluster.clone(),
            assignment,
            cost: self.cost_model(),
            training: self.training_config(),
            single_device: self.training.single_device.map(DeviceId),
            record_events: self.event_log,
        };
        setup.validate().map_err(|e| invalid(&e))?;
        let data =
            Datasets::generate(&spec, &self.data, &cluster.ids()).map_err(|e| invalid(&e))?;
        Ok(Resolved { setup, data })
    }
}
