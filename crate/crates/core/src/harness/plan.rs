//! Experiment plan files.
//!
//! A plan is a TOML document: a `[plan]` section naming modes and seeds,
//! then one section per component configuration. Every key is optional
//! except `plan.modes`; unknown keys are rejected.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{ControlLoopConfig, MemoryConfig, NetworkConfig, RunMode, TrainSettings};
use crate::curvature::CurvatureConfig;
use crate::error::{Error, Result};
use crate::memory::BatchControllerConfig;
use crate::scheduler::SchedulerConfig;
use crate::task::TaskConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub modes: Vec<RunMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Runs executed concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Denominator of the memory percentage. Defaults to the simulated
    /// `memory.mem_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_reference_bytes: Option<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub plan: PlanSection,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub control: ControlLoopConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub curvature: CurvatureConfig,
    #[serde(default)]
    pub batch: BatchControllerConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
}

impl ExperimentPlan {
    /// Default configuration for the given modes and seeds.
    pub fn new(modes: Vec<RunMode>, seeds: Vec<u64>) -> Self {
        ExperimentPlan {
            plan: PlanSection {
                modes,
                seeds,
                workers: default_workers(),
                mem_reference_bytes: None,
            },
            task: TaskConfig::default(),
            network: NetworkConfig::default(),
            control: ControlLoopConfig::default(),
            scheduler: SchedulerConfig::default(),
            curvature: CurvatureConfig::default(),
            batch: BatchControllerConfig::default(),
            memory: MemoryConfig::default(),
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            network: self.network.clone(),
            control: self.control.clone(),
            scheduler: self.scheduler.clone(),
            curvature: self.curvature.clone(),
            batch: self.batch.clone(),
            memory: self.memory.clone(),
        }
    }

    pub fn mem_reference(&self) -> u64 {
        self.plan.mem_reference_bytes.unwrap_or(self.memory.mem_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.plan.modes.is_empty() {
            return Err(Error::config("plan needs at least one mode"));
        }
        if self.plan.seeds.is_empty() {
            return Err(Error::config("plan needs at least one seed"));
        }
        let mut modes = HashSet::new();
        if let Some(m) = self.plan.modes.iter().find(|m| !modes.insert(**m)) {
            return Err(Error::config(format!("mode {m} listed twice")));
        }
        let mut seeds = HashSet::new();
        if let Some(s) = self.plan.seeds.iter().find(|s| !seeds.insert(**s)) {
            return Err(Error::config(format!("seed {s} listed twice")));
        }
        if self.plan.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if self.mem_reference() == 0 {
            return Err(Error::config("memory reference must be positive"));
        }
        self.task.validate()?;
        self.settings().validate()
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plan types always serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan = Self::from_toml_str(&text).map_err(|e| Error::Plan {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_plan_uses_defaults() {
        let plan = ExperimentPlan::from_toml_str("[plan]\nmodes = [\"tri_accel\"]\n").unwrap();
        assert_eq!(plan.plan.seeds, vec![1, 2, 3]);
        assert_eq!(plan.curvature.k, 5);
        assert_eq!(plan.curvature.period_steps, 200);
        assert_eq!(plan.curvature.probe_batch, 32);
        assert_eq!(plan.control.initial_batch, 96);
        assert_eq!(plan.mem_reference(), plan.memory.mem_max);
        plan.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut plan =
            ExperimentPlan::new(vec![RunMode::Fp32Baseline, RunMode::TriAccel], vec![7, 3]);
        plan.scheduler.tau_curv = f64::INFINITY;
        plan.plan.mem_reference_bytes = Some(1_000_000_000);
        let text = plan.to_toml_string();
        let back = ExperimentPlan::from_toml_str(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn unknown_keys_fail() {
        let err = ExperimentPlan::from_toml_str(
            "[plan]\nmodes = [\"tri_accel\"]\n[control]\nctrl_perod = 5\n",
        );
        assert!(err.is_err());
        let err = ExperimentPlan::from_toml_str("[plan]\nmodes = [\"tri_accel\"]\n[extra]\n");
        assert!(err.is_err());
        let err = ExperimentPlan::from_toml_str("[plan]\nmodes = [\"amp\"]\n");
        assert!(err.is_err());
    }

    #[test]
    fn validation() {
        let mut plan = ExperimentPlan::new(vec![], vec![1]);
        assert!(plan.validate().is_err());
        plan.plan.modes = vec![RunMode::TriAccel, RunMode::TriAccel];
        assert!(plan.validate().is_err());
        plan.plan.modes = vec![RunMode::TriAccel];
        plan.plan.seeds = vec![1, 1];
        assert!(plan.validate().is_err());
        plan.plan.seeds = vec![1];
        plan.scheduler.tau_low = 1.0;
        assert!(plan.validate().is_err());
    }
}
