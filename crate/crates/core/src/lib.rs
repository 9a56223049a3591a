//! Ring-topology pipelined adapter fine-tuning on edge devices.
//!
//! * [`domain`]: layer assignment, unfreezing schedule, cost model, device profiles.
//! * [`engine`]: a small transformer with serial adapters and a hand-written backward pass.
//! * [`sim`]: discrete-event scheduler producing event logs, makespans and memory peaks.
//! * [`trainer`]: the round-based driver coupling engine numerics to the virtual clock.
//! * [`baselines`]: single-device and weight-stashing pipeline reference schemes.

pub mod baselines;
pub mod domain;
pub mod engine;
pub mod sim;
pub mod trainer;
