//! The unified control loop.
//!
//! Every optimizer step updates the per-layer variance EMAs. Every
//! `ctrl_period` steps a control tick runs four phases in a fixed order:
//!
//! 1. collect statistics (and, on curvature-period boundaries, probe each
//!    layer's top-k Hessian eigenvalues),
//! 2. reassign per-layer precision from the variance EMAs, then apply
//!    curvature promotion,
//! 3. rescale per-layer learning rates from the latest curvature estimates,
//! 4. resize the batch from the simulated memory usage of the *new*
//!    precision map.
//!
//! [`RunMode`] switches individual mechanisms off to obtain the baselines
//! and ablations.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::{top_k, CurvatureConfig, CurvatureEstimate};
use crate::error::{Error, Result};
use crate::memory::{
    adjust_batch, BatchControllerConfig, BatchControllerState, BatchDecision, MemoryModel,
};
use crate::net::{Activation, LayerGrad, LayerSpec, Network};
use crate::precision::{LossScale, PrecisionMode};
use crate::scheduler::{apply_curvature_promotion, scale_lr_for, LayerState, SchedulerConfig};
use crate::stats::{instant_variance, VarianceTracker};
use crate::task::{BatchSampler, Dataset, SyntheticTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// All layers FP32, fixed batch, no curvature.
    Fp32Baseline,
    /// All layers BF16 with FP32 master weights, fixed batch.
    StaticMixed,
    /// Every mechanism enabled.
    TriAccel,
    /// Variance-driven precision plus curvature promotion; fixed batch and
    /// unscaled learning rates.
    AblationPrecisionOnly,
    /// FP32 everywhere with the batch controller enabled.
    AblationBatchOnly,
}

impl RunMode {
    pub const ALL: [RunMode; 5] = [
        RunMode::Fp32Baseline,
        RunMode::StaticMixed,
        RunMode::TriAccel,
        RunMode::AblationPrecisionOnly,
        RunMode::AblationBatchOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Fp32Baseline => "fp32_baseline",
            RunMode::StaticMixed => "static_mixed",
            RunMode::TriAccel => "tri_accel",
            RunMode::AblationPrecisionOnly => "ablation_precision_only",
            RunMode::AblationBatchOnly => "ablation_batch_only",
        }
    }

    pub fn dynamic_precision(self) -> bool {
        matches!(self, RunMode::TriAccel | RunMode::AblationPrecisionOnly)
    }

    pub fn dynamic_batch(self) -> bool {
        matches!(self, RunMode::TriAccel | RunMode::AblationBatchOnly)
    }

    pub fn curvature_lr(self) -> bool {
        matches!(self, RunMode::TriAccel)
    }

    pub fn probes_curvature(self) -> bool {
        self.dynamic_precision() || self.curvature_lr()
    }

    /// Precision of every layer before the first control tick.
    pub fn initial_precision(self) -> PrecisionMode {
        match self {
            RunMode::Fp32Baseline | RunMode::AblationBatchOnly => PrecisionMode::Fp32,
            _ => PrecisionMode::Bf16,
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown run mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlLoopConfig {
    /// Steps between control ticks.
    pub ctrl_period: u64,
    pub total_steps: u64,
    /// Linear warmup length, in epochs at the initial batch size.
    pub warmup_epochs: u64,
    pub momentum: f64,
    /// Smoothing factor of the variance EMA.
    pub ema_beta: f64,
    pub loss_scale: f64,
    pub initial_batch: usize,
    /// Loss above this aborts the run.
    pub divergence_loss: f64,
}

impl Default for ControlLoopConfig {
    fn default() -> Self {
        ControlLoopConfig {
            ctrl_period: 50,
            total_steps: 3000,
            warmup_epochs: 5,
            momentum: 0.9,
            ema_beta: 0.9,
            loss_scale: 1024.0,
            initial_batch: 96,
            divergence_loss: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Simulated device capacity in bytes.
    pub mem_max: u64,
    /// Fixed runtime overhead on top of parameter and optimizer state.
    pub overhead_bytes: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            mem_max: 60_000,
            overhead_bytes: 0,
        }
    }
}

/// Everything a single training run needs besides the task, mode and seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub network: NetworkConfig,
    pub control: ControlLoopConfig,
    pub scheduler: SchedulerConfig,
    pub curvature: CurvatureConfig,
    pub batch: BatchControllerConfig,
    pub memory: MemoryConfig,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let c = &self.control;
        if c.ctrl_period == 0 || c.total_steps == 0 {
            return Err(Error::config("ctrl_period and total_steps must be >= 1"));
        }
        if !(0.0..1.0).contains(&c.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if c.initial_batch == 0 {
            return Err(Error::config("initial_batch must be >= 1"));
        }
        if !(c.divergence_loss > 0.0) {
            return Err(Error::config("divergence_loss must be positive"));
        }
        if self.network.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        LossScale::new(c.loss_scale)?;
        self.scheduler.validate()?;
        self.curvature.validate()?;
        self.batch.validate()?;
        if !(self.batch.b_min..=self.batch.b_max).contains(&c.initial_batch) {
            return Err(Error::config("initial_batch lies outside [b_min, b_max]"));
        }
        if self.memory.mem_max == 0 {
            return Err(Error::config("mem_max must be positive"));
        }
        Ok(())
    }

    pub fn layer_specs(&self, input_dim: usize, classes: usize) -> Vec<LayerSpec> {
        Network::mlp_specs(
            input_dim,
            &self.network.hidden,
            classes,
            self.network.activation,
        )
    }

    pub fn memory_model(&self, specs: &[LayerSpec]) -> Result<MemoryModel> {
        MemoryModel::for_network(specs, self.memory.overhead_bytes, self.memory.mem_max)
    }
}

/// Independent RNG seeds derived from a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub sampler: u64,
    pub probe_sampler: u64,
    pub curvature: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut state = seed;
        let mut next = || {
            // splitmix64
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        RunSeeds {
            init: next(),
            sampler: next(),
            probe_sampler: next(),
            curvature: next(),
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn for_task(task: &SyntheticTask, control: &ControlLoopConfig) -> Self {
        let per_epoch = task.steps_per_epoch(control.initial_batch) as u64;
        LrSchedule {
            warmup_steps: (control.warmup_epochs * per_epoch).min(control.total_steps),
            total_steps: control.total_steps,
        }
    }

    pub fn factor(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return 1.0;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Relative compute cost of one value in each precision mode.
pub fn precision_time_factor(mode: PrecisionMode) -> f64 {
    match mode {
        PrecisionMode::Fp16 => 0.5,
        PrecisionMode::Bf16 => 0.55,
        PrecisionMode::Fp32 => 1.0,
    }
}

/// Simulated time of one step: per layer parameter count times the
/// precision factor, times the batch size.
pub fn step_time_units(specs: &[LayerSpec], precisions: &[PrecisionMode], batch: usize) -> f64 {
    let per_sample: f64 = specs
        .iter()
        .zip(precisions)
        .map(|(s, &m)| s.param_count() as f64 * precision_time_factor(m))
        .sum();
    per_sample * batch as f64
}

/// Source of curvature estimates for the collect phase.
pub trait CurvatureSource {
    fn probe(
        &mut self,
        layer: usize,
        cfg: &CurvatureConfig,
        step: u64,
    ) -> Result<CurvatureEstimate>;
}

/// Probes a network's layer Hessians on a minibatch sampled once per step.
pub struct NetworkCurvature<'a> {
    net: &'a Network,
    data: &'a Dataset,
    sampler: &'a mut BatchSampler,
    cached: Option<(u64, Dataset)>,
}

impl<'a> NetworkCurvature<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset, sampler: &'a mut BatchSampler) -> Self {
        NetworkCurvature {
            net,
            data,
            sampler,
            cached: None,
        }
    }
}

impl CurvatureSource for NetworkCurvature<'_> {
    fn probe(
        &mut self,
        layer: usize,
        cfg: &CurvatureConfig,
        step: u64,
    ) -> Result<CurvatureEstimate> {
        if self.cached.as_ref().map(|(s, _)| *s) != Some(step) {
            let idx = self.sampler.next_indices(cfg.probe_batch);
            self.cached = Some((step, self.data.subset(&idx)));
        }
        let (_, batch) = self.cached.as_ref().expect("probe batch sampled above");
        let op = self
            .net
            .layer_hessian(layer, &batch.inputs, &batch.labels)?;
        let k = cfg.k.min(self.net.layers()[layer].param_count());
        let cfg = CurvatureConfig { k, ..cfg.clone() };
        top_k(&op, &cfg, layer, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlPhase {
    Collect,
    Precision,
    LearningRate,
    Batch,
}

impl ControlPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlPhase::Collect => "collect",
            ControlPhase::Precision => "precision",
            ControlPhase::LearningRate => "lr",
            ControlPhase::Batch => "batch",
        }
    }
}

/// What one control tick did, phase by phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TickTrace {
    pub step: u64,
    /// Phases in execution order.
    pub phases: Vec<ControlPhase>,
    /// Estimates produced by this tick's probes (empty between probes).
    pub probes: Vec<CurvatureEstimate>,
    pub precisions: Vec<PrecisionMode>,
    pub promoted: Vec<bool>,
    pub effective_lrs: Vec<f64>,
    /// Usage fed to the batch controller, computed with `precisions`.
    pub usage: u64,
    pub batch_before: usize,
    pub batch_after: usize,
    pub decision: BatchDecision,
}

/// State of every adaptive mechanism for one run.
#[derive(Debug, Clone)]
pub struct Controller {
    mode: RunMode,
    ctrl_period: u64,
    scheduler: SchedulerConfig,
    curvature: CurvatureConfig,
    batch_cfg: BatchControllerConfig,
    memory: MemoryModel,
    tracker: VarianceTracker,
    layers: Vec<LayerState>,
    batch: BatchControllerState,
    estimates: Vec<Option<CurvatureEstimate>>,
    loss_scale: LossScale,
}

impl Controller {
    pub fn new(mode: RunMode, settings: &TrainSettings, specs: &[LayerSpec]) -> Result<Self> {
        settings.validate()?;
        let memory = settings.memory_model(specs)?;
        let n = specs.len();
        let init = mode.initial_precision();
        Ok(Controller {
            mode,
            ctrl_period: settings.control.ctrl_period,
            scheduler: settings.scheduler.clone(),
            curvature: settings.curvature.clone(),
            batch_cfg: settings.batch.clone(),
            memory,
            tracker: VarianceTracker::new(n, settings.control.ema_beta)?,
            layers: (0..n)
                .map(|l| LayerState::new(l, init, settings.scheduler.eta0))
                .collect(),
            batch: BatchControllerState::new(settings.control.initial_batch),
            estimates: vec![None; n],
            loss_scale: LossScale::new(settings.control.loss_scale)?,
        })
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    pub fn memory(&self) -> &MemoryModel {
        &self.memory
    }

    pub fn batch(&self) -> usize {
        self.batch.batch
    }

    pub fn loss_scale(&self) -> LossScale {
        self.loss_scale
    }

    pub fn layer_states(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn estimates(&self) -> &[Option<CurvatureEstimate>] {
        &self.estimates
    }

    pub fn precision_map(&self) -> Vec<PrecisionMode> {
        self.layers.iter().map(|s| s.precision).collect()
    }

    pub fn effective_lrs(&self) -> Vec<f64> {
        self.layers.iter().map(|s| s.effective_lr).collect()
    }

    /// Folds one step's gradients into the variance EMAs.
    pub fn observe(&mut self, grads: &[LayerGrad]) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::config(format!(
                "{} layer gradients for {} layers",
                grads.len(),
                self.layers.len()
            )));
        }
        for (l, g) in grads.iter().enumerate() {
            let var = instant_variance(g.iter())?;
            self.layers[l].variance_ema = self.tracker.update(l, var)?;
        }
        Ok(())
    }

    /// Non-finite loss: every layer to FP32 and the loss scale halved.
    pub fn recover(&mut self) {
        for s in &mut self.layers {
            s.precision = PrecisionMode::Fp32;
        }
        self.loss_scale = self.loss_scale.halved();
    }

    pub fn control_tick(
        &mut self,
        now: u64,
        source: &mut dyn CurvatureSource,
    ) -> Result<TickTrace> {
        if !now.is_multiple_of(self.ctrl_period) {
            return Err(Error::Argument(format!(
                "control tick at step {now} is not a multiple of {}",
                self.ctrl_period
            )));
        }
        let mut phases = Vec::with_capacity(4);

        // (1) statistics: EMAs are current; probe on curvature boundaries
        let mut probes = Vec::new();
        if self.mode.probes_curvature() && now.is_multiple_of(self.curvature.period_steps) {
            for l in 0..self.layers.len() {
                let est = source.probe(l, &self.curvature, now)?;
                if est.layer != l {
                    return Err(Error::config(format!(
                        "probe for layer {l} returned layer {}",
                        est.layer
                    )));
                }
                self.estimates[l] = Some(est.clone());
                probes.push(est);
            }
        }
        phases.push(ControlPhase::Collect);

        // (2) precision
        if self.mode.dynamic_precision() {
            for l in 0..self.layers.len() {
                if let Some(v) = self.tracker.get(l) {
                    self.layers[l].assign_from_variance(v, &self.scheduler, now);
                }
            }
            for est in &probes {
                let l = est.layer;
                self.layers[l] = apply_curvature_promotion(
                    &self.layers[l],
                    est,
                    &self.scheduler,
                    now,
                    self.curvature.period_steps,
                )?;
            }
        }
        phases.push(ControlPhase::Precision);

        // (3) learning rates from the latest (possibly stale) estimates
        if self.mode.curvature_lr() {
            for (state, est) in self.layers.iter_mut().zip(&self.estimates) {
                if let Some(est) = est {
                    state.effective_lr = scale_lr_for(est.max_signed()?, &self.scheduler);
                }
            }
        }
        phases.push(ControlPhase::LearningRate);

        // (4) batch size against the precision map assigned above
        let precisions = self.precision_map();
        let usage = self.memory.mem_usage(self.batch.batch, &precisions);
        let batch_before = self.batch.batch;
        if self.mode.dynamic_batch() {
            self.batch = adjust_batch(&self.batch, &self.batch_cfg, usage, self.memory.mem_max());
        } else {
            self.batch.last_usage = usage;
            self.batch.last_decision = BatchDecision::Hold;
        }
        phases.push(ControlPhase::Batch);

        Ok(TickTrace {
            step: now,
            phases,
            probes,
            promoted: self
                .layers
                .iter()
                .map(|s| s.promoted_by_curvature)
                .collect(),
            precisions,
            effective_lrs: self.effective_lrs(),
            usage,
            batch_before,
            batch_after: self.batch.batch,
            decision: self.batch.last_decision,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSnapshot {
    pub variance_ema: f64,
    pub precision: PrecisionMode,
    pub effective_lr: f64,
}

/// Telemetry for one optimizer step. Layer snapshots and usage describe the
/// configuration the step ran with; `tick` holds any control decisions
/// taken after it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvent {
    pub step: u64,
    pub loss: f64,
    pub batch: usize,
    pub usage: u64,
    pub layers: Vec<LayerSnapshot>,
    pub tick: Option<TickTrace>,
    /// Non-finite loss triggered the recovery path on this step.
    pub recovery: bool,
    pub sim_time_units: f64,
    /// Seconds since the run started; informational only.
    pub wall_time: f64,
}

impl StepEvent {
    pub fn curvature_event(&self) -> bool {
        self.tick.as_ref().is_some_and(|t| !t.probes.is_empty())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub mode: RunMode,
    pub seed: u64,
    pub accuracy_pct: f64,
    pub sim_time_units: f64,
    pub peak_mem_bytes: u64,
    pub mem_max: u64,
    pub final_loss: f64,
    pub events: Vec<StepEvent>,
    pub wall_time_secs: f64,
    /// Set when the run stopped early on divergence.
    pub aborted: Option<String>,
}

/// SGD with heavy-ball momentum on full-width master weights.
#[derive(Debug, Clone)]
pub struct Momentum {
    momentum: f64,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Momentum {
    pub fn new(net: &Network, momentum: f64) -> Self {
        Momentum {
            momentum,
            velocity: net
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// `v <- mu v + g; w <- w - lr v`, one learning rate per layer.
    pub fn step(&mut self, net: &mut Network, grads: &[LayerGrad], lrs: &[f64]) {
        let mu = self.momentum;
        for (((layer, g), (vw, vb)), &lr) in net
            .layers_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(lrs)
        {
            for ((w, &gi), v) in layer.weights.iter_mut().zip(&g.weights).zip(vw.iter_mut()) {
                *v = mu * *v + gi;
                *w -= lr * *v;
            }
            for ((b, &gi), v) in layer.bias.iter_mut().zip(&g.bias).zip(vb.iter_mut()) {
                *v = mu * *v + gi;
                *b -= lr * *v;
            }
        }
    }
}

/// Builds the seeded initial network for a run.
pub fn initial_network(
    task: &SyntheticTask,
    settings: &TrainSettings,
    seed: u64,
) -> Result<Network> {
    let specs = settings.layer_specs(task.config.input_dim, task.config.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(RunSeeds::derive(seed).init);
    Network::init(&specs, &mut rng)
}

/// Trains `net` on `task` under `mode`. Deterministic given `seed`, apart
/// from the informational wall-clock fields.
pub fn train(
    net: &mut Network,
    task: &SyntheticTask,
    settings: &TrainSettings,
    mode: RunMode,
    seed: u64,
) -> Result<TrainReport> {
    settings.validate()?;
    let specs = net.specs();
    if net.input_dim() != task.config.input_dim || net.output_dim() != task.config.classes {
        return Err(Error::config("network shape does not match the task"));
    }
    let seeds = RunSeeds::derive(seed);
    let curvature = CurvatureConfig {
        seed: seeds.curvature,
        ..settings.curvature.clone()
    };
    let settings = TrainSettings {
        curvature,
        ..settings.clone()
    };
    let control = &settings.control;
    let mut controller = Controller::new(mode, &settings, &specs)?;
    let schedule = LrSchedule::for_task(task, control);
    let mut sampler = BatchSampler::new(task.train.len(), seeds.sampler);
    let mut probe_sampler = BatchSampler::new(task.train.len(), seeds.probe_sampler);
    let mut optimizer = Momentum::new(net, control.momentum);

    let start = Instant::now();
    let mut events = Vec::with_capacity(control.total_steps as usize);
    let mut peak = 0u64;
    let mut sim_time = 0.0;
    let mut non_finite_streak = 0u32;
    let mut aborted = None;
    let mut final_loss = f64::NAN;

    for step in 0..control.total_steps {
        let batch_size = controller.batch();
        let precisions = controller.precision_map();
        let usage = controller.memory().mem_usage(batch_size, &precisions);
        peak = peak.max(usage);
        let snapshot: Vec<LayerSnapshot> = controller
            .layer_states()
            .iter()
            .map(|s| LayerSnapshot {
                variance_ema: s.variance_ema,
                precision: s.precision,
                effective_lr: s.effective_lr,
            })
            .collect();

        let idx = sampler.next_indices(batch_size);
        let batch = task.train.subset(&idx);
        let bw = net.loss_and_grads(
            &batch.inputs,
            &batch.labels,
            &precisions,
            controller.loss_scale(),
        )?;
        let step_time = step_time_units(&specs, &precisions, batch_size);
        sim_time += step_time;
        controller.observe(&bw.grads)?;
        final_loss = bw.loss;

        let mut recovery = false;
        if bw.non_finite {
            non_finite_streak += 1;
            if non_finite_streak >= 2 {
                aborted = Some(format!(
                    "non-finite loss on consecutive steps {} and {step}",
                    step - 1
                ));
            } else {
                controller.recover();
                recovery = true;
            }
        } else {
            non_finite_streak = 0;
            if bw.loss > control.divergence_loss {
                aborted = Some(format!(
                    "loss {} exceeded {} at step {step}",
                    bw.loss, control.divergence_loss
                ));
            } else {
                let factor = schedule.factor(step);
                let lrs: Vec<f64> = controller
                    .effective_lrs()
                    .iter()
                    .map(|lr| lr * factor)
                    .collect();
                optimizer.step(net, &bw.grads, &lrs);
            }
        }

        let tick = if aborted.is_none() && step % control.ctrl_period == 0 {
            let mut source = NetworkCurvature::new(net, &task.train, &mut probe_sampler);
            Some(controller.control_tick(step, &mut source)?)
        } else {
            None
        };

        events.push(StepEvent {
            step,
            loss: bw.loss,
            batch: batch_size,
            usage,
            layers: snapshot,
            tick,
            recovery,
            sim_time_units: step_time,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if aborted.is_some() {
            break;
        }
    }

    let accuracy_pct = net.accuracy(&task.test.inputs, &task.test.labels)?;
    Ok(TrainReport {
        mode,
        seed,
        accuracy_pct,
        sim_time_units: sim_time,
        peak_mem_bytes: peak,
        mem_max: controller.memory().mem_max(),
        final_loss,
        events,
        wall_time_secs: start.elapsed().as_secs_f64(),
        aborted,
    })
}
