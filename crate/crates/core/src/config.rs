//! Run configuration files for the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::kernels::DurationModel;
use crate::orchestrator::RuntimeConfig;
use crate::scheduler::SchedulerPolicy;
use crate::sim::vm::{VmBaselineModel, VmModelError};
use crate::sim::{ClusterModel, ModelError};
use crate::workload::{WorkloadError, WorkloadSpec};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SLUICE_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vm(#[from] VmModelError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cluster: ClusterModel,
    pub scheduler: SchedulerPolicy,
    /// Overrides `cluster.rng_seed` when set.
    pub seed: Option<u64>,
    pub fault_tolerance: bool,
    pub monitor_interval_ms: u64,
    pub notification_latency_ms: u64,
    pub max_attempts: u32,
    pub durations: DurationModel,
    pub workload: Option<WorkloadSpec>,
    pub output_dir: Option<PathBuf>,
    pub vm_baseline: VmBaselineModel,
    /// Bench sampling period.
    pub sample_interval_ms: u64,
    /// Seed of generated sample inputs.
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rt = RuntimeConfig::default();
        RunConfig {
            cluster: rt.cluster,
            scheduler: rt.scheduler,
            seed: None,
            fault_tolerance: rt.fault_tolerance,
            monitor_interval_ms: rt.monitor_interval_ms,
            notification_latency_ms: rt.notification_latency_ms,
            max_attempts: rt.max_attempts,
            durations: rt.durations,
            workload: None,
            output_dir: None,
            vm_baseline: VmBaselineModel::default(),
            sample_interval_ms: 1000,
            data_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cluster.validate()?;
        self.vm_baseline.validate()?;
        if let Some(w) = &self.workload {
            w.arrivals.validate()?;
        }
        if self.monitor_interval_ms == 0 || self.sample_interval_ms == 0 {
            return Err(ConfigError::Invalid("intervals must be > 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(ConfigError::Invalid("max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.cluster.rng_seed)
    }

    pub fn runtime(&self) -> RuntimeConfig {
        RuntimeConfig {
            cluster: ClusterModel {
                rng_seed: self.effective_seed(),
                ..self.cluster.clone()
            },
            scheduler: self.scheduler,
            fault_tolerance: self.fault_tolerance,
            monitor_interval_ms: self.monitor_interval_ms,
            notification_latency_ms: self.notification_latency_ms,
            max_attempts: self.max_attempts,
            max_skips: None,
            durations: self.durations.clone(),
            record_trace: true,
        }
    }

    /// Output directory: the configured one, else `$SLUICE_OUT_DIR`, else `out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
