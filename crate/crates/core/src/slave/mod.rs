//! Serving-side shard.
//!
//! A [`SlaveReplica`] consumes every log partition, keeps the records whose
//! ids it owns and answers pulls from a [`ServingTable`]. Versions are loaded
//! from checkpoints and resume scatter from the offsets stored with them.

mod hook;
mod table;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use hook::{IdentityHook, ScaleHook, TransformHook};
pub use table::{ScatterReport, ServingCounters, ServingTable};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::master::{next_instance_id, CheckpointStore};
use crate::model::{transform_for_serving, ModelSchema};
use crate::plog::SharedLog;

/// Builds a serving table from a complete checkpoint version: the shard's
/// slice in serving view, with consumed offsets set to the version's replay
/// offsets.
pub fn table_from_version(
    store: &CheckpointStore,
    model_id: &str,
    version: u64,
    shard_id: u32,
    num_shards: u32,
    schema: Arc<ModelSchema>,
    num_partitions: u32,
    exec: Exec,
) -> Result<ServingTable> {
    let (manifest, snaps) = store.load_set(model_id, version, exec)?;
    let mut t = ServingTable::new(model_id, shard_id, num_shards, schema.clone(), num_partitions);
    t.set_version(version);
    let slices = exec.try_map(&snaps, |snap| {
        snap.entries
            .iter()
            .filter(|(id, _)| t.owns(*id))
            .map(|(id, e)| Ok((*id, transform_for_serving(&schema, &e.slot)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    for (id, slot) in slices.into_iter().flatten() {
        t.insert(id, slot);
    }
    t.set_offsets(&manifest.replay_offsets());
    Ok(t)
}

/// Tries `version`, then older complete versions, newest first.
pub fn table_from_version_or_older(
    store: &CheckpointStore,
    model_id: &str,
    version: u64,
    shard_id: u32,
    num_shards: u32,
    schema: Arc<ModelSchema>,
    num_partitions: u32,
    exec: Exec,
) -> Result<ServingTable> {
    let mut candidates: Vec<u64> = store
        .complete_versions(model_id)
        .into_iter()
        .filter(|&v| v < version)
        .collect();
    candidates.push(version);
    for v in candidates.into_iter().rev() {
        if let Ok(t) =
            table_from_version(store, model_id, v, shard_id, num_shards, schema.clone(), num_partitions, exec)
        {
            return Ok(t);
        }
    }
    Err(Error::ShardDown { shard_id })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlaveConfig {
    /// Records read per partition per scatter step.
    pub max_batch: usize,
    pub exec: Exec,
}

impl Default for SlaveConfig {
    fn default() -> Self {
        SlaveConfig {
            max_batch: 4096,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaveHealth {
    pub model_id: String,
    pub shard_id: u32,
    pub replica_id: u32,
    pub instance_id: u64,
    pub alive: bool,
    pub servable: bool,
    pub version: u64,
    pub params: usize,
    #[serde(with = "crate::wire::int_keys")]
    pub offsets: BTreeMap<u32, u64>,
}

/// One replica of one slave shard.
pub struct SlaveReplica {
    model_id: Arc<str>,
    shard_id: u32,
    num_shards: u32,
    replica_id: u32,
    instance_id: u64,
    schema: Arc<ModelSchema>,
    log: SharedLog,
    hook: Arc<dyn TransformHook>,
    cfg: SlaveConfig,
    table: RwLock<Arc<ServingTable>>,
    alive: AtomicBool,
    servable: AtomicBool,
    switching: Mutex<()>,
}

impl SlaveReplica {
    pub fn new(
        model_id: &str,
        shard_id: u32,
        num_shards: u32,
        replica_id: u32,
        schema: Arc<ModelSchema>,
        log: SharedLog,
        cfg: SlaveConfig,
    ) -> Result<Self> {
        if num_shards == 0 || shard_id >= num_shards {
            return Err(Error::Config(format!("slave shard {shard_id} of {num_shards}")));
        }
        let table = ServingTable::new(model_id, shard_id, num_shards, schema.clone(), log.num_partitions());
        Ok(SlaveReplica {
            model_id: Arc::from(model_id),
            shard_id,
            num_shards,
            replica_id,
            instance_id: next_instance_id(),
            schema,
            log,
            hook: Arc::new(IdentityHook),
            cfg,
            table: RwLock::new(Arc::new(table)),
            alive: AtomicBool::new(true),
            servable: AtomicBool::new(true),
            switching: Mutex::new(()),
        })
    }

    pub fn with_hook(mut self, hook: Arc<dyn TransformHook>) -> Self {
        self.hook = hook;
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn replica_id(&self) -> u32 {
        self.replica_id
    }

    pub fn instance_id(&self) -> u64 {
        self.instance_id
    }

    pub fn table(&self) -> Arc<ServingTable> {
        self.table.read().clone()
    }

    pub fn kill(&self) {
        self.alive.store(false, Ordering::Release);
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    pub fn is_servable(&self) -> bool {
        self.is_alive() && self.servable.load(Ordering::Acquire)
    }

    pub fn set_servable(&self, on: bool) {
        self.servable.store(on, Ordering::Release);
    }

    fn unavailable(&self, reason: &str) -> Error {
        Error::Unavailable {
            shard_id: self.shard_id,
            reason: format!("replica {}: {reason}", self.replica_id),
        }
    }

    pub fn pull_serving(&self, model_id: &str, ids: &[u64]) -> Result<Vec<(u64, crate::model::ParameterSlot)>> {
        if !self.is_alive() {
            return Err(self.unavailable("down"));
        }
        if !self.servable.load(Ordering::Acquire) {
            return Err(self.unavailable("switching version"));
        }
        if model_id != &*self.model_id {
            return Err(Error::ModelMismatch {
                expected: self.model_id.to_string(),
                got: model_id.to_string(),
            });
        }
        self.table().pull(ids)
    }

    pub fn scatter_step(&self) -> Result<ScatterReport> {
        if !self.is_alive() {
            return Err(self.unavailable("down"));
        }
        self.table()
            .scatter_step(&*self.log, self.cfg.max_batch, &*self.hook, self.cfg.exec)
    }

    /// Consumes up to the current tails.
    pub fn catch_up(&self) -> Result<ScatterReport> {
        self.table()
            .catch_up(&*self.log, None, self.cfg.max_batch, &*self.hook, self.cfg.exec)
    }

    /// Consumes up to the given per-partition offsets.
    pub fn catch_up_to(&self, targets: &BTreeMap<u32, u64>) -> Result<ScatterReport> {
        self.table()
            .catch_up(&*self.log, Some(targets), self.cfg.max_batch, &*self.hook, self.cfg.exec)
    }

    /// Loads `version` (or the newest older one that is intact), replays the
    /// log to the current tail and swaps it in. Returns the version loaded.
    pub fn load_version(&self, store: &CheckpointStore, version: u64) -> Result<u64> {
        let _g = self.switching.lock();
        let fresh = table_from_version_or_older(
            store,
            &self.model_id,
            version,
            self.shard_id,
            self.num_shards,
            self.schema.clone(),
            self.log.num_partitions(),
            self.cfg.exec,
        )?;
        fresh.catch_up(&*self.log, None, self.cfg.max_batch, &*self.hook, self.cfg.exec)?;
        let loaded = fresh.version();
        *self.table.write() = Arc::new(fresh);
        Ok(loaded)
    }

    /// Starts over from an empty table at offset zero.
    pub fn reset(&self) {
        let _g = self.switching.lock();
        let t = ServingTable::new(
            &self.model_id,
            self.shard_id,
            self.num_shards,
            self.schema.clone(),
            self.log.num_partitions(),
        );
        *self.table.write() = Arc::new(t);
    }

    pub fn health(&self) -> SlaveHealth {
        let t = self.table();
        SlaveHealth {
            model_id: self.model_id.to_string(),
            shard_id: self.shard_id,
            replica_id: self.replica_id,
            instance_id: self.instance_id,
            alive: self.is_alive(),
            servable: self.is_servable(),
            version: t.version(),
            params: t.len(),
            offsets: t.offsets(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaInfo {
    pub replica_id: u32,
    pub endpoint: String,
    pub healthy: bool,
}

/// Replicas of one slave shard as seen by routing clients.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaGroup {
    pub slave_shard_id: u32,
    pub replicas: Vec<ReplicaInfo>,
}

impl ReplicaGroup {
    pub fn healthy(&self) -> impl Iterator<Item = &ReplicaInfo> {
        self.replicas.iter().filter(|r| r.healthy)
    }

    /// Deterministic spread over healthy replicas; a per-client counter as
    /// `request_key` gives round-robin.
    pub fn route(&self, request_key: u64) -> Result<&ReplicaInfo> {
        let healthy: Vec<&ReplicaInfo> = self.healthy().collect();
        if healthy.is_empty() {
            return Err(Error::ShardDown {
                shard_id: self.slave_shard_id,
            });
        }
        Ok(healthy[(request_key % healthy.len() as u64) as usize])
    }

    pub fn set_health(&mut self, replica_id: u32, healthy: bool) -> bool {
        match self.replicas.iter_mut().find(|r| r.replica_id == replica_id) {
            Some(r) if r.healthy != healthy => {
                r.healthy = healthy;
                true
            }
            _ => false,
        }
    }
}
