//! Simulated device memory and the batch-size feedback controller.
//!
//! Usage is linear in the batch size: a fixed term (parameters, optimizer
//! state, runtime overhead) plus per-sample activation storage whose width
//! follows each layer's precision mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::LayerSpec;
use crate::precision::PrecisionMode;

/// Bytes per parameter held regardless of compute precision: FP32 master
/// weight, FP32 momentum and FP32 gradient accumulator.
pub const STATE_BYTES_PER_PARAM: u64 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryModel {
    fixed_bytes: u64,
    /// Values stored per sample for each layer: its input, pre-activation
    /// and output.
    values_per_sample: Vec<u64>,
    mem_max: u64,
}

impl MemoryModel {
    pub fn new(fixed_bytes: u64, values_per_sample: Vec<u64>, mem_max: u64) -> Result<Self> {
        if mem_max == 0 {
            return Err(Error::config("mem_max must be positive"));
        }
        if values_per_sample.is_empty() || values_per_sample.contains(&0) {
            return Err(Error::config(
                "every layer must store at least one value per sample",
            ));
        }
        Ok(MemoryModel {
            fixed_bytes,
            values_per_sample,
            mem_max,
        })
    }

    /// Model for a network: fixed = params * 12 bytes + `overhead_bytes`,
    /// per layer `in_dim + 2 * out_dim` values per sample.
    pub fn for_network(specs: &[LayerSpec], overhead_bytes: u64, mem_max: u64) -> Result<Self> {
        let params: u64 = specs.iter().map(|s| s.param_count() as u64).sum();
        let values = specs
            .iter()
            .map(|s| (s.in_dim + 2 * s.out_dim) as u64)
            .collect();
        MemoryModel::new(
            params * STATE_BYTES_PER_PARAM + overhead_bytes,
            values,
            mem_max,
        )
    }

    pub fn fixed_bytes(&self) -> u64 {
        self.fixed_bytes
    }

    pub fn mem_max(&self) -> u64 {
        self.mem_max
    }

    pub fn layers(&self) -> usize {
        self.values_per_sample.len()
    }

    pub fn per_sample_bytes(&self, precisions: &[PrecisionMode]) -> u64 {
        debug_assert_eq!(precisions.len(), self.values_per_sample.len());
        self.values_per_sample
            .iter()
            .zip(precisions)
            .map(|(&n, m)| n * m.bytes_per_value())
            .sum()
    }

    pub fn mem_usage(&self, batch: usize, precisions: &[PrecisionMode]) -> u64 {
        self.fixed_bytes + batch as u64 * self.per_sample_bytes(precisions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchControllerConfig {
    pub rho_low: f64,
    pub rho_high: f64,
    pub delta_up: usize,
    pub delta_down: usize,
    pub b_min: usize,
    pub b_max: usize,
}

impl Default for BatchControllerConfig {
    fn default() -> Self {
        BatchControllerConfig {
            rho_low: 0.7,
            rho_high: 0.9,
            delta_up: 8,
            delta_down: 8,
            b_min: 1,
            b_max: 4096,
        }
    }
}

impl BatchControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.rho_low && self.rho_low < self.rho_high && self.rho_high <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < rho_low < rho_high <= 1, got {} and {}",
                self.rho_low, self.rho_high
            )));
        }
        if self.delta_up == 0 || self.delta_down == 0 {
            return Err(Error::config("batch step sizes must be >= 1"));
        }
        if self.b_min == 0 || self.b_min > self.b_max {
            return Err(Error::config("need 1 <= b_min <= b_max"));
        }
        Ok(())
    }

    pub fn clamp(&self, batch: usize) -> usize {
        batch.clamp(self.b_min, self.b_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchDecision {
    Up,
    Down,
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchControllerState {
    pub batch: usize,
    pub last_usage: u64,
    pub last_decision: BatchDecision,
}

impl BatchControllerState {
    pub fn new(batch: usize) -> Self {
        BatchControllerState {
            batch,
            last_usage: 0,
            last_decision: BatchDecision::Hold,
        }
    }
}

/// Which branch of the dead-band rule `usage` falls in. Both thresholds are
/// strict, so usage exactly at a threshold holds.
pub fn decide(cfg: &BatchControllerConfig, usage: u64, mem_max: u64) -> BatchDecision {
    let usage = usage as f64;
    if usage < threshold(cfg.rho_low, mem_max) {
        BatchDecision::Up
    } else if usage > threshold(cfg.rho_high, mem_max) {
        BatchDecision::Down
    } else {
        BatchDecision::Hold
    }
}

/// `rho * mem_max`, snapped to the nearest integer when within a few ulps
/// of it. Usage is a whole number of bytes, so a decimal fraction such as
/// 0.7 of 60000 must compare as exactly 42000 rather than one ulp above.
fn threshold(rho: f64, mem_max: u64) -> f64 {
    let t = rho * mem_max as f64;
    let r = t.round();
    if (t - r).abs() <= 8.0 * f64::EPSILON * t.abs() {
        r
    } else {
        t
    }
}

pub fn adjust_batch(
    state: &BatchControllerState,
    cfg: &BatchControllerConfig,
    usage: u64,
    mem_max: u64,
) -> BatchControllerState {
    let decision = decide(cfg, usage, mem_max);
    let batch = match decision {
        BatchDecision::Up => state.batch.saturating_add(cfg.delta_up),
        BatchDecision::Down => state.batch.saturating_sub(cfg.delta_down),
        BatchDecision::Hold => state.batch,
    };
    BatchControllerState {
        batch: cfg.clamp(batch),
        last_usage: usage,
        last_decision: decision,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SettleEnd {
    Hold,
    /// Wanted to shrink but already at `b_min`.
    SaturatedMin,
    /// Wanted to grow but already at `b_max`.
    SaturatedMax,
    /// The batch alternates between two sizes.
    TwoCycle,
    /// Gave up after the step budget without any of the above.
    StepLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settle {
    /// `(batch, usage)` at each controller evaluation.
    pub trace: Vec<(usize, u64)>,
    pub end: SettleEnd,
    pub final_state: BatchControllerState,
}

impl Settle {
    /// Number of batch changes made before termination.
    pub fn adjustments(&self) -> usize {
        self.trace.windows(2).filter(|w| w[0].0 != w[1].0).count()
    }
}

/// Runs the controller against a fixed precision map until it holds,
/// saturates or oscillates.
pub fn settle(
    model: &MemoryModel,
    cfg: &BatchControllerConfig,
    state: &BatchControllerState,
    precisions: &[PrecisionMode],
) -> Settle {
    let limit = cfg.b_max.div_ceil(cfg.delta_up.min(cfg.delta_down)) + 4;
    let mut state = BatchControllerState {
        batch: cfg.clamp(state.batch),
        ..state.clone()
    };
    let mut trace = Vec::new();
    for _ in 0..=limit {
        let usage = model.mem_usage(state.batch, precisions);
        trace.push((state.batch, usage));
        let next = adjust_batch(&state, cfg, usage, model.mem_max());
        let end = match next.last_decision {
            BatchDecision::Hold => Some(SettleEnd::Hold),
            BatchDecision::Down if next.batch == state.batch => Some(SettleEnd::SaturatedMin),
            BatchDecision::Up if next.batch == state.batch => Some(SettleEnd::SaturatedMax),
            _ => {
                let n = trace.len();
                if n >= 2 && trace[n - 2].0 == next.batch {
                    Some(SettleEnd::TwoCycle)
                } else {
                    None
                }
            }
        };
        state = next;
        if let Some(end) = end {
            return Settle {
                trace,
                end,
                final_state: state,
            };
        }
    }
    Settle {
        trace,
        end: SettleEnd::StepLimit,
        final_state: state,
    }
}
