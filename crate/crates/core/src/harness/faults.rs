//! Scripted failure injection.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::cluster::Cluster;
use super::config::ClusterConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum At {
    /// Once this many samples have been trained.
    Samples(u64),
    /// Once the cluster clock passes this many milliseconds.
    Ms(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultAction {
    KillMaster { shard: u32 },
    KillSlaveReplica { shard: u32, replica: u32 },
    StallLog { partition: u32, duration_ms: u64 },
    /// `version` defaults to the newest published one.
    CorruptCheckpoint { version: Option<u64>, shard: u32 },
}

impl FaultAction {
    pub fn describe(&self) -> String {
        match self {
            FaultAction::KillMaster { shard } => format!("kill-master({shard})"),
            FaultAction::KillSlaveReplica { shard, replica } => format!("kill-slave-replica({shard},{replica})"),
            FaultAction::StallLog { partition, duration_ms } => format!("stall-log({partition},{duration_ms}ms)"),
            FaultAction::CorruptCheckpoint { version, shard } => match version {
                Some(v) => format!("corrupt-checkpoint(v{v},{shard})"),
                None => format!("corrupt-checkpoint(latest,{shard})"),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStep {
    pub at: At,
    pub action: FaultAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    /// Cluster config to run the plan against, relative to the plan file.
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub actions: Vec<FaultStep>,
}

impl FaultPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut plan = Self::from_toml(&text)?;
        if let (Some(c), Some(parent)) = (&plan.config, path.parent()) {
            if c.is_relative() {
                plan.config = Some(parent.join(c));
            }
        }
        Ok(plan)
    }

    /// Every action must name a component the topology has.
    pub fn validate(&self, cfg: &ClusterConfig) -> Result<()> {
        let t = &cfg.topology;
        for step in &self.actions {
            let ok = match step.action {
                FaultAction::KillMaster { shard } => shard < t.masters,
                FaultAction::KillSlaveReplica { shard, replica } => shard < t.slaves && replica < t.replicas,
                FaultAction::StallLog { partition, .. } => partition < t.partitions,
                FaultAction::CorruptCheckpoint { shard, .. } => shard < t.masters,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "{} refers to a component the topology does not have",
                    step.action.describe()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedFault {
    pub at_samples: u64,
    pub at_ms: u64,
    pub action: String,
    pub outcome: String,
}

pub struct FaultInjector {
    plan: FaultPlan,
    next: usize,
    log: Vec<InjectedFault>,
}

impl FaultInjector {
    pub fn new(plan: FaultPlan) -> Self {
        FaultInjector {
            plan,
            next: 0,
            log: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.plan.actions.len()
    }

    pub fn injected(&self) -> &[InjectedFault] {
        &self.log
    }

    /// Applies every due action, in plan order.
    pub fn poll(&mut self, cluster: &Cluster, samples_done: u64) {
        let now_ms = cluster.clock.now().as_millis() as u64;
        while let Some(step) = self.plan.actions.get(self.next) {
            let due = match step.at {
                At::Samples(n) => samples_done >= n,
                At::Ms(ms) => now_ms >= ms,
            };
            if !due {
                break;
            }
            let outcome = match apply(cluster, &step.action) {
                Ok(s) => s,
                Err(e) => format!("failed: {e}"),
            };
            self.log.push(InjectedFault {
                at_samples: samples_done,
                at_ms: now_ms,
                action: step.action.describe(),
                outcome,
            });
            self.next += 1;
        }
    }
}


fn apply(cluster: &Cluster, action: &FaultAction) -> Result<String> {
    match *action {
        FaultAction::KillMaster { shard } => cluster.kill_master(shard).map(|_| "killed".into()),
        FaultAction::KillSlaveReplica { shard, replica } => cluster.kill_replica(shard, replica).map(|_| "killed".into()),
        FaultAction::StallLog { partition, duration_ms } => cluster
            .stall_partition(partition, Duration::from_millis(duration_ms))
            .map(|_| "stalled".into()),
        FaultAction::CorruptCheckpoint { version, shard } => {
            cluster.corrupt_checkpoint(version, shard).map(|v| format!("corrupted v{v}"))
        }
    }
}
