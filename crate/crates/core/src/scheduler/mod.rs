//! Control plane: routing metadata, membership, checkpoint triggers,
//! failover and version switching.
//!
//! All cluster metadata lives in the [`Registry`]; the scheduler keeps only
//! probe bookkeeping in memory, so a restarted scheduler picks up where the
//! last one stopped. Every [`ShardMap`] change goes through CAS.

mod registry;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use registry::{LeaseId, Registry, Versioned, WatchEvent};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::master::{CheckpointDest, CheckpointMeta, CheckpointStores, VersionManifest};
use crate::monitor::{plan_downgrade, DowngradePlan, MetricSample, TriggerConfig, VersionStrategy};
use crate::slave::{ReplicaGroup, ReplicaInfo};
use crate::wire::{Directory, NodeHealth, Request, Response, Service};

pub fn shardmap_key(model_id: &str) -> String {
    format!("{model_id}/shardmap")
}

pub fn metrics_prefix(model_id: &str) -> String {
    format!("{model_id}/metrics/")
}

pub fn metric_key(model_id: &str, window_id: u64) -> String {
    format!("{model_id}/metrics/{window_id:020}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberKind {
    Master,
    Slave,
}

impl MemberKind {
    fn as_str(self) -> &'static str {
        match self {
            MemberKind::Master => "master",
            MemberKind::Slave => "slave",
        }
    }
}

pub fn member_key(model_id: &str, kind: MemberKind, shard_id: u32, endpoint: &str) -> String {
    format!("{model_id}/members/{}/{shard_id}/{endpoint}", kind.as_str())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultToleranceConfig {
    /// Local checkpoint interval; 0 disables the tier.
    pub local_interval_ms: u64,
    pub remote_interval_ms: u64,
    /// Recorded for completeness; every checkpoint is a full snapshot.
    pub incremental_backup: bool,
    /// Healthy replicas per slave shard below which a replacement is started.
    pub min_replicas: usize,
}

impl Default for FaultToleranceConfig {
    fn default() -> Self {
        FaultToleranceConfig {
            local_interval_ms: 60_000,
            remote_interval_ms: 600_000,
            incremental_backup: false,
            min_replicas: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterInfo {
    pub shard_id: u32,
    pub endpoint: String,
    pub healthy: bool,
    /// No checkpoint could restore it.
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionInfo {
    pub version: u64,
    pub dest: CheckpointDest,
    /// Scheduler clock at publication.
    pub created_at_ms: u64,
    pub param_count: u64,
}

/// Routing and lifecycle document for one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardMap {
    pub model_id: String,
    pub num_master_shards: u32,
    pub num_slave_shards: u32,
    pub num_partitions: u32,
    pub masters: Vec<MasterInfo>,
    pub slaves: Vec<ReplicaGroup>,
    /// Serving version chosen by a switch; `None` means the live head.
    pub active_version: Option<u64>,
    /// Published (complete) checkpoint versions, ascending.
    pub versions: Vec<VersionInfo>,
    pub next_version: u64,
    pub fault_tolerance: FaultToleranceConfig,
    /// Set when a master shard could not be restored.
    pub flagged: Option<String>,
    /// Metric windows up to here are ignored by the downgrade check.
    pub metrics_after_window: Option<u64>,
}

impl ShardMap {
    pub fn new(
        model_id: &str,
        num_master_shards: u32,
        num_slave_shards: u32,
        num_partitions: u32,
        fault_tolerance: FaultToleranceConfig,
    ) -> Result<Self> {
        if num_master_shards == 0 || num_slave_shards == 0 || num_partitions == 0 {
            return Err(Error::Config(format!(
                "shard counts must be >= 1 (masters {num_master_shards}, slaves {num_slave_shards}, partitions {num_partitions})"
            )));
        }
        if model_id.is_empty() || model_id.contains('/') {
            return Err(Error::Config(format!("bad model id {model_id:?}")));
        }
        Ok(ShardMap {
            model_id: model_id.into(),
            num_master_shards,
            num_slave_shards,
            num_partitions,
            masters: (0..num_master_shards)
                .map(|shard_id| MasterInfo {
                    shard_id,
                    endpoint: String::new(),
                    healthy: false,
                    failed: false,
                })
                .collect(),
            slaves: (0..num_slave_shards)
                .map(|slave_shard_id| ReplicaGroup {
                    slave_shard_id,
                    replicas: Vec::new(),
                })
                .collect(),
            active_version: None,
            versions: Vec::new(),
            next_version: 1,
            fault_tolerance,
            flagged: None,
            metrics_after_window: None,
        })
    }

    pub fn latest_version(&self) -> Option<u64> {
        self.versions.last().map(|v| v.version)
    }

    pub fn version_numbers(&self) -> Vec<u64> {
        self.versions.iter().map(|v| v.version).collect()
    }

    /// Version a fresh slave replica should start from.
    pub fn serving_version(&self) -> Option<u64> {
        self.active_version.or(self.latest_version())
    }

    pub fn master_endpoint(&self, shard_id: u32) -> Result<&str> {
        match self.masters.get(shard_id as usize) {
            Some(m) if m.healthy && !m.endpoint.is_empty() => Ok(&m.endpoint),
            _ => Err(Error::ShardDown { shard_id }),
        }
    }

    fn endpoint_in_use(&self, endpoint: &str) -> bool {
        self.masters.iter().any(|m| m.endpoint == endpoint)
            || self.slaves.iter().flat_map(|g| &g.replicas).any(|r| r.endpoint == endpoint)
    }

    pub fn is_healthy(&self) -> bool {
        self.masters.iter().all(|m| m.healthy) && self.slaves.iter().all(|g| g.healthy().next().is_some())
    }
}

/// Starts replacement nodes.
pub trait Spawner: Send + Sync {
    /// Starts an empty master for `shard_id` and returns its endpoint.
    fn spawn_master(&self, map: &ShardMap, shard_id: u32) -> Result<String>;
    /// Starts an empty slave replica and returns its endpoint.
    fn spawn_slave(&self, map: &ShardMap, shard_id: u32, replica_id: u32) -> Result<String>;
}

/// Refuses to start anything; failover then only reroutes.
pub struct NoSpawner;

impl Spawner for NoSpawner {
    fn spawn_master(&self, _: &ShardMap, shard_id: u32) -> Result<String> {
        Err(Error::ShardDown { shard_id })
    }

    fn spawn_slave(&self, _: &ShardMap, shard_id: u32, _: u32) -> Result<String> {
        Err(Error::ShardDown { shard_id })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub probe_interval_ms: u64,
    pub miss_threshold: u32,
    /// Checkpoint jitter window as a fraction of the tier interval.
    pub jitter_fraction: f64,
    pub seed: u64,
    pub auto_downgrade: bool,
    pub trigger: TriggerConfig,
    pub strategy: VersionStrategy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            probe_interval_ms: 500,
            miss_threshold: 3,
            jitter_fraction: 0.2,
            seed: 7,
            auto_downgrade: true,
            trigger: TriggerConfig::default(),
            strategy: VersionStrategy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Scheduler clock, milliseconds.
    pub at_ms: u64,
    pub model_id: String,
    pub kind: String,
    pub detail: String,
}

struct Probe {
    misses: u32,
    lease: Option<LeaseId>,
}

#[derive(Default)]
struct Timers {
    last_probe: Option<Duration>,
    last_ckpt: HashMap<(String, CheckpointDest), Duration>,
}

pub struct Scheduler {
    registry: Arc<Registry>,
    dir: Arc<Directory>,
    stores: CheckpointStores,
    spawner: Arc<dyn Spawner>,
    clock: Arc<dyn Clock>,
    cfg: SchedulerConfig,
    rng: Mutex<ChaCha8Rng>,
    probes: Mutex<HashMap<String, Probe>>,
    timers: Mutex<Timers>,
    events: Mutex<Vec<Event>>,
    /// Serializes actions so each runs to completion before the next.
    serial: Mutex<()>,
}

impl Scheduler {
    pub fn new(
        registry: Arc<Registry>,
        dir: Arc<Directory>,
        stores: CheckpointStores,
        spawner: Arc<dyn Spawner>,
        clock: Arc<dyn Clock>,
        cfg: SchedulerConfig,
    ) -> Self {
        Scheduler {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            registry,
            dir,
            stores,
            spawner,
            clock,
            cfg,
            probes: Mutex::default(),
            timers: Mutex::default(),
            events: Mutex::default(),
            serial: Mutex::new(()),
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn directory(&self) -> &Arc<Directory> {
        &self.dir
    }

    pub fn stores(&self) -> &CheckpointStores {
        &self.stores
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().clone()
    }

    fn now_ms(&self) -> u64 {
        self.clock.now().as_millis() as u64
    }

    fn event(&self, model_id: &str, kind: &str, detail: String) {
        self.events.lock().push(Event {
            at_ms: self.now_ms(),
            model_id: model_id.into(),
            kind: kind.into(),
            detail,
        });
    }

    fn lease_ttl(&self) -> Duration {
        Duration::from_millis(self.cfg.probe_interval_ms * u64::from(self.cfg.miss_threshold + 1))
    }

    /// Publishes a new model. Version numbering continues after any versions
    /// already on disk.
    pub fn create_model(&self, mut map: ShardMap) -> Result<()> {
        let on_disk = self
            .stores
            .local
            .next_version(&map.model_id)
            .max(self.stores.remote.next_version(&map.model_id));
        map.next_version = map.next_version.max(on_disk);
        self.registry
            .cas(&shardmap_key(&map.model_id), None, serde_json::to_value(&map)?)
            .map_err(|_| Error::AlreadyRegistered(map.model_id.clone()))?;
        Ok(())
    }

    pub fn models(&self) -> Vec<String> {
        self.registry
            .list("")
            .into_iter()
            .filter_map(|(k, _)| k.strip_suffix("/shardmap").map(str::to_string))
            .collect()
    }

    pub fn shard_map(&self, model_id: &str) -> Result<ShardMap> {
        self.registry
            .get_as::<ShardMap>(&shardmap_key(model_id))?
            .map(|(m, _)| m)
            .ok_or_else(|| Error::Config(format!("unknown model {model_id}")))
    }

    pub fn update_map<R>(&self, model_id: &str, f: impl FnMut(&mut ShardMap) -> Result<R>) -> Result<R> {
        self.registry.update(&shardmap_key(model_id), f)
    }

    /// Records membership under a TTL lease and routes to the endpoint.
    pub fn register(
        &self,
        model_id: &str,
        kind: MemberKind,
        shard_id: u32,
        replica_id: u32,
        endpoint: &str,
    ) -> Result<LeaseId> {
        let key = member_key(model_id, kind, shard_id, endpoint);
        let lease = self.registry.grant(self.lease_ttl());
        let doc = json!({ "endpoint": endpoint, "replica_id": replica_id });
        if self.registry.cas_with_lease(&key, None, doc, Some(lease)).is_err() {
            self.registry.revoke(lease);
            return Err(Error::AlreadyRegistered(key));
        }
        let routed = self.update_map(model_id, |m| {
            let taken = m.endpoint_in_use(endpoint);
            match kind {
                MemberKind::Master => {
                    let Some(info) = m.masters.get_mut(shard_id as usize) else {
                        return Err(Error::Config(format!("no master shard {shard_id}")));
                    };
                    if taken && info.endpoint != endpoint {
                        return Err(Error::AlreadyRegistered(endpoint.into()));
                    }
                    info.endpoint = endpoint.into();
                    info.healthy = true;
                    info.failed = false;
                }
                MemberKind::Slave => {
                    let Some(g) = m.slaves.get_mut(shard_id as usize) else {
                        return Err(Error::Config(format!("no slave shard {shard_id}")));
                    };
                    let same = g.replicas.iter().any(|r| r.replica_id == replica_id && r.endpoint == endpoint);
                    if taken && !same {
                        return Err(Error::AlreadyRegistered(endpoint.into()));
                    }
                    g.replicas.retain(|r| r.replica_id != replica_id);
                    g.replicas.push(ReplicaInfo {
                        replica_id,
                        endpoint: endpoint.into(),
                        healthy: true,
                    });
                    g.replicas.sort_by_key(|r| r.replica_id);
                }
            }
            Ok(())
        });
        if let Err(e) = routed {
            self.registry.revoke(lease);
            return Err(e);
        }
        self.probes.lock().insert(
            endpoint.to_string(),
            Probe {
                misses: 0,
                lease: Some(lease),
            },
        );
        Ok(lease)
    }

    fn deregister(&self, model_id: &str, kind: MemberKind, shard_id: u32, endpoint: &str) {
        self.registry.delete(&member_key(model_id, kind, shard_id, endpoint));
        if let Some(p) = self.probes.lock().remove(endpoint) {
            if let Some(l) = p.lease {
                self.registry.revoke(l);
            }
        }
    }

    /// Periodic work: probes, due checkpoint tiers, lease expiry and the
    /// downgrade check. Call it often; it decides what is due.
    pub fn tick(&self) {
        let _g = self.serial.lock();
        let now = self.clock.now();
        let probe_due = {
            let mut t = self.timers.lock();
            let due = t
                .last_probe
                .is_none_or(|p| now.saturating_sub(p) >= Duration::from_millis(self.cfg.probe_interval_ms));
            if due {
                t.last_probe = Some(now);
            }
            due
        };
        for model in self.models() {
            if probe_due {
                self.probe_model(&model);
            }
            self.run_due_checkpoints(&model, now);
            if self.cfg.auto_downgrade {
                let _ = self.downgrade_locked(&model);
            }
        }
        for key in self.registry.sweep() {
            self.on_lease_expired(&key);
        }
    }

    fn on_lease_expired(&self, key: &str) {
        let parts: Vec<&str> = key.splitn(5, '/').collect();
        let [model, "members", kind, shard, endpoint] = parts[..] else { return };
        let Ok(shard) = shard.parse::<u32>() else { return };
        self.probes.lock().remove(endpoint);
        let _ = self.update_map(model, |m| {
            match kind {
                "master" => {
                    if let Some(info) = m.masters.get_mut(shard as usize) {
                        if info.endpoint == endpoint {
                            info.healthy = false;
                        }
                    }
                }
                _ => {
                    if let Some(g) = m.slaves.get_mut(shard as usize) {
                        g.replicas.retain(|r| r.endpoint != endpoint);
                    }
                }
            }
            Ok(())
        });
        self.event(model, "lease-expired", endpoint.to_string());
    }

    /// Returns whether the endpoint answered and reported itself alive.
    fn probe(&self, endpoint: &str) -> bool {
        let ok = self
            .dir
            .client(endpoint)
            .and_then(|c| c.health())
            .is_ok_and(|h| h.alive());
        let mut probes = self.probes.lock();
        let p = probes.entry(endpoint.to_string()).or_insert(Probe { misses: 0, lease: None });
        if ok {
            p.misses = 0;
            if let Some(l) = p.lease {
                if self.registry.keepalive(l).is_err() {
                    p.lease = None;
                }
            }
        } else {
            p.misses += 1;
        }
        ok
    }

    fn missed_out(&self, endpoint: &str) -> bool {
        self.probes
            .lock()
            .get(endpoint)
            .is_some_and(|p| p.misses >= self.cfg.miss_threshold)
    }

    fn probe_model(&self, model: &str) {
        let Ok(map) = self.shard_map(model) else { return };
        for m in &map.masters {
            if m.endpoint.is_empty() || m.failed {
                continue;
            }
            let ok = self.probe(&m.endpoint);
            if !ok && m.healthy && self.missed_out(&m.endpoint) {
                let shard = m.shard_id;
                let _ = self.update_map(model, |map| {
                    map.masters[shard as usize].healthy = false;
                    Ok(())
                });
                self.event(model, "master-down", format!("shard {shard} at {}", m.endpoint));
                if let Err(e) = self.failover_master_locked(model, shard) {
                    self.event(model, "failover-failed", format!("master {shard}: {e}"));
                }
            }
        }
        for g in &map.slaves {
            for r in &g.replicas {
                let ok = self.probe(&r.endpoint);
                if ok && !r.healthy {
                    let (s, id) = (g.slave_shard_id, r.replica_id);
                    let _ = self.update_map(model, |map| Ok(map.slaves[s as usize].set_health(id, true)));
                    self.event(model, "replica-up", format!("slave {s} replica {id}"));
                } else if !ok && r.healthy && self.missed_out(&r.endpoint) {
                    let (s, id) = (g.slave_shard_id, r.replica_id);
                    if let Err(e) = self.failover_slave_locked(model, s, id) {
                        self.event(model, "failover-failed", format!("slave {s} replica {id}: {e}"));
                    }
                }
            }
        }
    }

    fn run_due_checkpoints(&self, model: &str, now: Duration) {
        let Ok(map) = self.shard_map(model) else { return };
        let ft = map.fault_tolerance;
        for (dest, interval) in [
            (CheckpointDest::Local, ft.local_interval_ms),
            (CheckpointDest::RemoteSim, ft.remote_interval_ms),
        ] {
            if interval == 0 {
                continue;
            }
            let due = {
                let mut t = self.timers.lock();
                let last = *t.last_ckpt.entry((model.to_string(), dest)).or_insert(now);
                let due = now.saturating_sub(last) >= Duration::from_millis(interval);
                if due {
                    t.last_ckpt.insert((model.to_string(), dest), now);
                }
                due
            };
            if due {
                let jitter = Duration::from_millis((interval as f64 * self.cfg.jitter_fraction) as u64);
                let _ = self.checkpoint_locked(model, dest, jitter);
            }
        }
    }

    /// Asks every master for a checkpoint of a fresh version and publishes
    /// the version only when every shard succeeded.
    pub fn trigger_checkpoints(&self, model_id: &str, dest: CheckpointDest) -> Result<(u64, Vec<CheckpointMeta>)> {
        let _g = self.serial.lock();
        self.checkpoint_locked(model_id, dest, Duration::ZERO)
    }

    /// Same with per-shard start jitter uniform in `[0, jitter]`.
    pub fn trigger_checkpoints_jittered(
        &self,
        model_id: &str,
        dest: CheckpointDest,
        jitter: Duration,
    ) -> Result<(u64, Vec<CheckpointMeta>)> {
        let _g = self.serial.lock();
        self.checkpoint_locked(model_id, dest, jitter)
    }

    /// Draws the per-shard start delays for one checkpoint round.
    pub fn draw_jitter(&self, shards: usize, max: Duration) -> Vec<Duration> {
        let max_us = max.as_micros() as u64;
        let mut rng = self.rng.lock();
        (0..shards)
            .map(|_| Duration::from_micros(rng.random_range(0..=max_us)))
            .collect()
    }

    fn checkpoint_locked(
        &self,
        model_id: &str,
        dest: CheckpointDest,
        jitter: Duration,
    ) -> Result<(u64, Vec<CheckpointMeta>)> {
        let map = self.shard_map(model_id)?;
        if let Some(m) = map.masters.iter().find(|m| !m.healthy || m.failed) {
            let e = Error::CheckpointFailed(format!("master shard {} is not healthy", m.shard_id));
            self.event(model_id, "checkpoint-skipped", e.to_string());
            return Err(e);
        }
        let version = self.update_map(model_id, |m| {
            let v = m.next_version;
            m.next_version += 1;
            Ok(v)
        })?;
        let delays = self.draw_jitter(map.masters.len(), jitter);
        let sleep = !self.clock.is_logical();
        let results: Vec<Result<CheckpointMeta>> = std::thread::scope(|s| {
            let handles: Vec<_> = map
                .masters
                .iter()
                .zip(&delays)
                .map(|(m, d)| {
                    s.spawn(move || {
                        if sleep {
                            std::thread::sleep(*d);
                        }
                        self.dir.client(&m.endpoint)?.save_ckpt(model_id, version, dest)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::CheckpointFailed("save thread panicked".into()))))
                .collect()
        });
        let mut metas = Vec::with_capacity(results.len());
        for (shard, r) in results.into_iter().enumerate() {
            match r {
                Ok(meta) => metas.push(meta),
                Err(e) => {
                    let e = Error::CheckpointFailed(format!("v{version} shard {shard}: {e}"));
                    self.event(model_id, "checkpoint-failed", e.to_string());
                    return Err(e);
                }
            }
        }
        let manifest = VersionManifest::new(model_id, version, metas.clone())?;
        self.stores.get(dest).write_manifest(&manifest)?;
        let created_at_ms = self.clock.now().as_millis() as u64;
        self.update_map(model_id, |m| {
            m.versions.push(VersionInfo {
                version,
                dest,
                created_at_ms,
                param_count: manifest.param_count(),
            });
            m.versions.sort_by_key(|v| v.version);
            Ok(())
        })?;
        self.event(
            model_id,
            "checkpoint",
            format!("v{version} to {} ({} params)", dest.as_str(), manifest.param_count()),
        );
        Ok((version, metas))
    }

    /// Replaces one master shard from the newest restorable checkpoint; the
    /// other shards are not touched.
    pub fn failover_master(&self, model_id: &str, shard_id: u32) -> Result<u64> {
        let _g = self.serial.lock();
        self.failover_master_locked(model_id, shard_id)
    }

    fn failover_master_locked(&self, model_id: &str, shard_id: u32) -> Result<u64> {
        let map = self.shard_map(model_id)?;
        let old = map
            .masters
            .get(shard_id as usize)
            .ok_or_else(|| Error::Config(format!("no master shard {shard_id}")))?
            .endpoint
            .clone();
        let mut candidates: Vec<(u64, CheckpointDest)> = Vec::new();
        for v in map.versions.iter().rev() {
            for dest in [CheckpointDest::Local, CheckpointDest::RemoteSim] {
                if self.stores.get(dest).read_manifest(model_id, v.version).is_ok() {
                    candidates.push((v.version, dest));
                }
            }
        }
        let mut restored = None;
        if !candidates.is_empty() {
            let endpoint = self.spawner.spawn_master(&map, shard_id)?;
            let client = self.dir.client(&endpoint)?;
            for (v, dest) in candidates {
                if let Ok(rep) = client.load_ckpt(model_id, v, dest) {
                    restored = Some((endpoint.clone(), rep));
                    break;
                }
            }
        }
        let Some((endpoint, rep)) = restored else {
            let reason = format!("master shard {shard_id} has no restorable checkpoint");
            self.update_map(model_id, |m| {
                m.masters[shard_id as usize].failed = true;
                m.masters[shard_id as usize].healthy = false;
                m.flagged = Some(reason.clone());
                Ok(())
            })?;
            self.event(model_id, "master-unrecoverable", reason.clone());
            return Err(Error::NoCheckpoint(reason));
        };
        self.deregister(model_id, MemberKind::Master, shard_id, &old);
        self.register(model_id, MemberKind::Master, shard_id, 0, &endpoint)?;
        self.event(
            model_id,
            "master-failover",
            format!(
                "shard {shard_id} restored from v{} at {endpoint} ({} params, {} deletes)",
                rep.version, rep.restored, rep.deleted
            ),
        );
        Ok(rep.version)
    }

    /// Takes a replica out of routing and, if the group is now too small,
    /// bootstraps a replacement from the serving version.
    pub fn failover_slave(&self, model_id: &str, shard_id: u32, replica_id: u32) -> Result<()> {
        let _g = self.serial.lock();
        self.failover_slave_locked(model_id, shard_id, replica_id)
    }

    fn failover_slave_locked(&self, model_id: &str, shard_id: u32, replica_id: u32) -> Result<()> {
        let map = self.update_map(model_id, |m| {
            let g = m
                .slaves
                .get_mut(shard_id as usize)
                .ok_or_else(|| Error::Config(format!("no slave shard {shard_id}")))?;
            g.set_health(replica_id, false);
            Ok(m.clone())
        })?;
        self.event(model_id, "replica-down", format!("slave {shard_id} replica {replica_id}"));
        let g = &map.slaves[shard_id as usize];
        if g.healthy().count() >= map.fault_tolerance.min_replicas {
            return Ok(());
        }
        let new_id = g.replicas.iter().map(|r| r.replica_id + 1).max().unwrap_or(0);
        let endpoint = self.spawner.spawn_slave(&map, shard_id, new_id)?;
        let version = map.serving_version();
        let loaded = self.dir.client(&endpoint)?.load_version(model_id, version)?;
        if let Some(dead) = g.replicas.iter().find(|r| r.replica_id == replica_id) {
            self.deregister(model_id, MemberKind::Slave, shard_id, &dead.endpoint);
            self.update_map(model_id, |m| {
                m.slaves[shard_id as usize].replicas.retain(|r| r.replica_id != replica_id);
                Ok(())
            })?;
        }
        self.register(model_id, MemberKind::Slave, shard_id, new_id, &endpoint)?;
        self.event(
            model_id,
            "replica-bootstrap",
            format!("slave {shard_id} replica {new_id} at {endpoint} from v{loaded}"),
        );
        Ok(())
    }

    /// Makes `version` the serving version; replicas reload one at a time.
    pub fn switch_version(&self, model_id: &str, version: u64) -> Result<u64> {
        let _g = self.serial.lock();
        self.switch_locked(model_id, version)
    }

    fn switch_locked(&self, model_id: &str, version: u64) -> Result<u64> {
        if self.stores.locate(model_id, version).is_none() {
            return Err(Error::IncompleteCheckpoint {
                version,
                reason: "switch rejected: no complete checkpoint set".into(),
            });
        }
        let map = self.update_map(model_id, |m| {
            m.active_version = Some(version);
            Ok(m.clone())
        })?;
        let mut failures = Vec::new();
        for g in &map.slaves {
            let s = g.slave_shard_id;
            for r in g.replicas.iter().filter(|r| r.healthy) {
                // Leave the replica routable if it is the only one.
                let excluded = self.update_map(model_id, |m| {
                    let grp = &mut m.slaves[s as usize];
                    if grp.healthy().count() > 1 {
                        Ok(grp.set_health(r.replica_id, false))
                    } else {
                        Ok(false)
                    }
                })?;
                let res = self.dir.client(&r.endpoint).and_then(|c| c.load_version(model_id, Some(version)));
                match res {
                    Ok(_) if excluded => {
                        self.update_map(model_id, |m| Ok(m.slaves[s as usize].set_health(r.replica_id, true)))?;
                    }
                    Ok(_) => {}
                    Err(e) => failures.push(format!("slave {s} replica {}: {e}", r.replica_id)),
                }
            }
        }
        self.event(
            model_id,
            "switch-version",
            if failures.is_empty() {
                format!("v{version}")
            } else {
                format!("v{version}; failed: {}", failures.join("; "))
            },
        );
        Ok(version)
    }

    pub fn publish_metric(&self, model_id: &str, sample: &MetricSample) -> Result<()> {
        publish_metric(&self.registry, model_id, sample)
    }

    /// Windows the downgrade check looks at, oldest first.
    pub fn metric_history(&self, model_id: &str) -> Result<Vec<MetricSample>> {
        let after = self.shard_map(model_id)?.metrics_after_window;
        let mut out = Vec::new();
        for (_, v) in self.registry.list(&metrics_prefix(model_id)) {
            let s: MetricSample = serde_json::from_value(v.value)?;
            if after.is_none_or(|a| s.window_id > a) {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Runs the downgrade check and, if it fires, switches versions.
    pub fn evaluate_downgrade(&self, model_id: &str) -> Result<Option<DowngradePlan>> {
        let _g = self.serial.lock();
        self.downgrade_locked(model_id)
    }

    fn downgrade_locked(&self, model_id: &str) -> Result<Option<DowngradePlan>> {
        let history = self.metric_history(model_id)?;
        let map = self.shard_map(model_id)?;
        let outcome = plan_downgrade(&history, &self.cfg.trigger, &map.version_numbers(), self.cfg.strategy);
        let last_window = history.last().map(|s| s.window_id);
        let plan = match outcome {
            Ok(Some(plan)) => plan,
            Ok(None) => return Ok(None),
            Err(e) => {
                self.update_map(model_id, |m| {
                    m.metrics_after_window = last_window;
                    Ok(())
                })?;
                self.event(model_id, "downgrade-aborted", e.to_string());
                return Err(e);
            }
        };
        self.switch_locked(model_id, plan.target_version)?;
        // Restart the baseline: the live model keeps training on the same stream.
        self.update_map(model_id, |m| {
            m.metrics_after_window = last_window;
            Ok(())
        })?;
        self.event(
            model_id,
            "downgrade",
            format!(
                "{}; onset window {}, degraded v{}, switched to v{}",
                plan.decision.reason, plan.onset_window, plan.degraded_version, plan.target_version
            ),
        );
        Ok(Some(plan))
    }
}

pub fn publish_metric(registry: &Registry, model_id: &str, sample: &MetricSample) -> Result<()> {
    registry.put(&metric_key(model_id, sample.window_id), serde_json::to_value(sample)?);
    Ok(())
}

impl Service for Scheduler {
    fn handle(&self, req: Request) -> Response {
        match req {
            Request::TriggerCkpt { model_id, dest } => {
                Response::from_result(self.trigger_checkpoints(&model_id, dest), |(version, shards)| {
                    Response::CkptTriggered { version, shards }
                })
            }
            Request::SwitchVersion { model_id, version } => {
                Response::from_result(self.switch_version(&model_id, version), |version| {
                    Response::VersionSwitched { version }
                })
            }
            Request::Status { model_id } => Response::from_result(self.shard_map(&model_id), |m| Response::Status {
                shard_map: Box::new(m),
            }),
            Request::Health => Response::Health {
                health: NodeHealth::Scheduler { models: self.models() },
            },
            other => Response::Error {
                kind: "wire".into(),
                message: format!("scheduler does not handle {}", other.name()),
            },
        }
    }
}

#[cfg(test)]
mod tests;
