//! Per-layer precision and learning-rate decisions.

use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureEstimate;
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Variance EMA below this runs in FP16.
    pub tau_low: f64,
    /// Variance EMA at or above this runs in FP32.
    pub tau_high: f64,
    /// Curvature above this promotes the layer to FP32.
    pub tau_curv: f64,
    /// Base learning rate.
    pub eta0: f64,
    /// Curvature damping coefficient for the learning rate.
    pub alpha: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            tau_low: 1e-4,
            tau_high: 1e-2,
            tau_curv: 50.0,
            eta0: 0.1,
            alpha: 0.01,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low > 0.0 && self.tau_low < self.tau_high) {
            return Err(Error::config(format!(
                "need 0 < tau_low < tau_high, got {} and {}",
                self.tau_low, self.tau_high
            )));
        }
        if self.tau_curv.is_nan() {
            return Err(Error::config("tau_curv is NaN"));
        }
        if !(self.eta0.is_finite() && self.eta0 > 0.0) {
            return Err(Error::config("eta0 must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha must be non-negative"));
        }
        Ok(())
    }
}

/// Piecewise variance-to-precision map. `+inf` (the non-finite marker) and
/// NaN both select FP32.
pub fn select_precision(v: f64, cfg: &SchedulerConfig) -> PrecisionMode {
    if v < cfg.tau_low {
        PrecisionMode::Fp16
    } else if v < cfg.tau_high {
        PrecisionMode::Bf16
    } else {
        PrecisionMode::Fp32
    }
}

/// `eta0 / (1 + alpha * max(0, max_signed))`.
///
/// Negative curvature is clamped to zero so the rate never exceeds `eta0`.
pub fn scale_lr(estimate: &CurvatureEstimate, cfg: &SchedulerConfig) -> Result<f64> {
    let lambda = estimate.max_signed()?;
    Ok(scale_lr_for(lambda, cfg))
}

pub(crate) fn scale_lr_for(lambda: f64, cfg: &SchedulerConfig) -> f64 {
    let lambda = if lambda.is_nan() {
        0.0
    } else {
        lambda.max(0.0)
    };
    let lr = cfg.eta0 / (1.0 + cfg.alpha * lambda);
    // huge curvature would otherwise round the rate to zero
    lr.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub layer: usize,
    pub variance_ema: f64,
    pub precision: PrecisionMode,
    pub effective_lr: f64,
    pub promoted_by_curvature: bool,
    /// First step at which an active promotion no longer applies.
    pub promotion_expiry_step: u64,
}

impl LayerState {
    pub fn new(layer: usize, precision: PrecisionMode, eta0: f64) -> Self {
        LayerState {
            layer,
            variance_ema: 0.0,
            precision,
            effective_lr: eta0,
            promoted_by_curvature: false,
            promotion_expiry_step: 0,
        }
    }

    /// Re-derives precision from the variance EMA unless a curvature
    /// promotion is still active at `now`.
    pub fn assign_from_variance(&mut self, variance_ema: f64, cfg: &SchedulerConfig, now: u64) {
        self.variance_ema = variance_ema;
        if self.promoted_by_curvature && now < self.promotion_expiry_step {
            self.precision = PrecisionMode::Fp32;
            return;
        }
        self.promoted_by_curvature = false;
        self.precision = select_precision(variance_ema, cfg);
    }
}

/// Promotes the layer to FP32 for one curvature period when the estimate's
/// signed maximum exceeds `tau_curv`. Below threshold the state is returned
/// unchanged.
pub fn apply_curvature_promotion(
    state: &LayerState,
    estimate: &CurvatureEstimate,
    cfg: &SchedulerConfig,
    now: u64,
    period_steps: u64,
) -> Result<LayerState> {
    if estimate.layer != state.layer {
        return Err(Error::Argument(format!(
            "estimate for layer {} applied to layer {}",
            estimate.layer, state.layer
        )));
    }
    let mut next = state.clone();
    if estimate.max_signed()? > cfg.tau_curv {
        next.precision = PrecisionMode::Fp32;
        next.promoted_by_curvature = true;
        next.promotion_expiry_step = now + period_steps;
    }
    Ok(next)
}
