use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::workload::WorkloadSpec;
use crate::clock::ClockMode;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::master::{GatherConfig, MasterConfig};
use crate::model::{HyperParams, ModelSchema, SchemaKind};
use crate::scheduler::{FaultToleranceConfig, SchedulerConfig, ShardMap};
use crate::slave::SlaveConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Every component is a thread of this process.
    SingleProcess,
    /// Masters and slave replicas are `weips node` subprocesses over TCP.
    MultiProcess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogBackend {
    Memory,
    File,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub masters: u32,
    pub slaves: u32,
    pub replicas: u32,
    pub partitions: u32,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            masters: 1,
            slaves: 1,
            replicas: 1,
            partitions: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: SchemaKind,
    pub hyper: HyperParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: SchemaKind::LrFtrl,
            hyper: HyperParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn schema(&self) -> Result<ModelSchema> {
        ModelSchema::new(self.kind, self.hyper)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    pub backend: LogBackend,
    pub compress: bool,
    pub fsync: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            backend: LogBackend::Memory,
            compress: false,
            fsync: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Concurrent trainer threads.
    pub threads: usize,
    pub batch_size: usize,
    /// Samples to train on; 0 runs until stopped.
    pub samples: u64,
    /// Logical-clock advance per sample.
    pub logical_ms_per_sample: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            threads: 1,
            batch_size: 100,
            samples: 100_000,
            logical_ms_per_sample: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreshnessConfig {
    pub probes: usize,
    pub probe_interval_ms: u64,
    /// Give up on one probe after this long.
    pub timeout_ms: u64,
}

impl Default for FreshnessConfig {
    fn default() -> Self {
        FreshnessConfig {
            probes: 500,
            probe_interval_ms: 10,
            timeout_ms: 30_000,
        }
    }
}

/// Whole-cluster configuration, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub model_id: String,
    pub mode: RunMode,
    pub clock: ClockMode,
    pub exec: Exec,
    /// Logs, checkpoints and reports go under here; empty means a temp dir.
    pub data_dir: PathBuf,
    pub topology: Topology,
    pub model: ModelConfig,
    pub log: LogConfig,
    pub master: MasterConfig,
    pub slave: SlaveConfig,
    pub fault_tolerance: FaultToleranceConfig,
    pub scheduler: SchedulerConfig,
    pub workload: WorkloadSpec,
    pub trainer: TrainerConfig,
    pub freshness: FreshnessConfig,
    /// Idle sleep of the master sync and slave scatter loops.
    pub idle_ms: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            model_id: "ctr".into(),
            mode: RunMode::SingleProcess,
            clock: ClockMode::Wall,
            exec: Exec::Parallel,
            data_dir: PathBuf::new(),
            topology: Topology::default(),
            model: ModelConfig::default(),
            log: LogConfig::default(),
            master: MasterConfig::default(),
            slave: SlaveConfig::default(),
            fault_tolerance: FaultToleranceConfig::default(),
            scheduler: SchedulerConfig::default(),
            workload: WorkloadSpec::default(),
            trainer: TrainerConfig::default(),
            freshness: FreshnessConfig::default(),
            idle_ms: 1,
        }
    }
}

impl ClusterConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ClusterConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        ShardMap::new(&self.model_id, t.masters, t.slaves, t.partitions, self.fault_tolerance)?;
        if t.replicas == 0 {
            return Err(Error::Config("replicas must be >= 1".into()));
        }
        self.model.schema()?;
        self.master.gather.validate()?;
        self.scheduler.trigger.validate()?;
        self.workload.validate()?;
        if self.trainer.threads == 0 || self.trainer.batch_size == 0 {
            return Err(Error::Config("trainer threads and batch_size must be >= 1".into()));
        }
        if self.master.collector_capacity == 0 || self.master.max_frame_records == 0 || self.slave.max_batch == 0 {
            return Err(Error::Config("collector, frame and batch sizes must be >= 1".into()));
        }
        if self.mode == RunMode::MultiProcess && self.log.backend != LogBackend::File {
            return Err(Error::Config("multi-process mode needs the file log backend".into()));
        }
        Ok(())
    }

    /// Applies the top-level exec choice to every component.
    pub fn resolved(mut self) -> Self {
        self.master.exec = self.exec;
        self.slave.exec = self.exec;
        self
    }

    pub fn with_gather(mut self, gather: GatherConfig) -> Self {
        self.master.gather = gather;
        self
    }
}
