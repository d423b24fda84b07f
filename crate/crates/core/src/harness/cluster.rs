//! Cluster assembly: scheduler, registry, log and shard nodes, either as
//! threads of this process or as `weips node` subprocesses.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::config::{ClusterConfig, LogBackend, RunMode};
use super::process::ProcessNodes;
use crate::client::ClusterClient;
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::master::{owner, CheckpointStores, MasterConfig, MasterShard};
use crate::model::{transform_for_serving, ModelSchema, ParameterSlot};
use crate::node::{master_sync_loop, scatter_loop, MasterNode, SlaveNode, Worker};
use crate::plog::{FaultyLog, FileLog, LogStore, MemLog, PartitionId, SharedLog};
use crate::scheduler::{MemberKind, Registry, Scheduler, ShardMap, Spawner};
use crate::slave::{SlaveConfig, SlaveReplica};
use crate::wire::Directory;

/// Kill switches over whatever runs the shard nodes.
pub trait NodeControl: Spawner {
    fn kill_master(&self, shard_id: u32) -> Result<()>;
    fn kill_replica(&self, shard_id: u32, replica_id: u32) -> Result<()>;
    fn shutdown(&self);
}

/// Shared settings for nodes started in this process.
pub struct NodeSettings {
    pub model_id: String,
    pub schema: Arc<ModelSchema>,
    pub log: SharedLog,
    pub clock: Arc<dyn Clock>,
    pub stores: CheckpointStores,
    pub dir: Arc<Directory>,
    pub master: MasterConfig,
    pub slave: SlaveConfig,
    pub num_masters: u32,
    pub num_slaves: u32,
    /// Start sync/scatter threads; otherwise the owner drives them.
    pub threaded: bool,
    pub idle: Duration,
}

type Entry<T> = (String, Arc<T>);

/// Shard nodes living in this process, registered in the [`Directory`] as
/// `local:` endpoints.
pub struct LocalNodes {
    s: NodeSettings,
    masters: RwLock<BTreeMap<u32, Entry<MasterShard>>>,
    /// Replaced master incarnations, kept for their counters.
    retired: Mutex<Vec<Arc<MasterShard>>>,
    replicas: RwLock<BTreeMap<(u32, u32), Entry<SlaveReplica>>>,
    workers: Mutex<HashMap<String, Worker>>,
}

impl LocalNodes {
    pub fn new(s: NodeSettings) -> Self {
        LocalNodes {
            s,
            masters: RwLock::default(),
            retired: Mutex::default(),
            replicas: RwLock::default(),
            workers: Mutex::default(),
        }
    }

    pub fn settings(&self) -> &NodeSettings {
        &self.s
    }

    pub fn start_master(&self, shard_id: u32) -> Result<String> {
        let s = &self.s;
        let m = Arc::new(MasterShard::new(
            &s.model_id,
            shard_id,
            s.num_masters,
            s.schema.clone(),
            s.log.clone(),
            s.clock.clone(),
            s.master.clone(),
        )?);
        let name = format!("master-{shard_id}.{}", m.instance_id());
        let ep = s.dir.register_local(
            &name,
            Arc::new(MasterNode {
                master: m.clone(),
                stores: s.stores.clone(),
            }),
        );
        if s.threaded {
            self.workers.lock().insert(ep.clone(), master_sync_loop(m.clone(), s.idle));
        }
        if let Some((_, old)) = self.masters.write().insert(shard_id, (ep.clone(), m)) {
            self.retired.lock().push(old);
        }
        Ok(ep)
    }

    pub fn start_replica(&self, shard_id: u32, replica_id: u32) -> Result<String> {
        let s = &self.s;
        let r = Arc::new(SlaveReplica::new(
            &s.model_id,
            shard_id,
            s.num_slaves,
            replica_id,
            s.schema.clone(),
            s.log.clone(),
            s.slave,
        )?);
        let name = format!("slave-{shard_id}-{replica_id}.{}", r.instance_id());
        let ep = s.dir.register_local(
            &name,
            Arc::new(SlaveNode {
                replica: r.clone(),
                stores: s.stores.clone(),
            }),
        );
        if s.threaded {
            self.workers.lock().insert(ep.clone(), scatter_loop(r.clone(), s.idle));
        }
        self.replicas.write().insert((shard_id, replica_id), (ep.clone(), r));
        Ok(ep)
    }

    /// Current incarnation of a master shard.
    pub fn master(&self, shard_id: u32) -> Option<Arc<MasterShard>> {
        self.masters.read().get(&shard_id).map(|e| e.1.clone())
    }

    pub fn masters(&self) -> Vec<Arc<MasterShard>> {
        self.masters.read().values().map(|e| e.1.clone()).collect()
    }

    /// Current and replaced master incarnations.
    pub fn all_masters(&self) -> Vec<Arc<MasterShard>> {
        let mut all = self.retired.lock().clone();
        all.extend(self.masters());
        all
    }

    pub fn replica(&self, shard_id: u32, replica_id: u32) -> Option<Arc<SlaveReplica>> {
        self.replicas.read().get(&(shard_id, replica_id)).map(|e| e.1.clone())
    }

    /// Every replica started, including killed ones.
    pub fn replicas(&self) -> Vec<Arc<SlaveReplica>> {
        self.replicas.read().values().map(|e| e.1.clone()).collect()
    }

    pub fn live_replicas(&self) -> Vec<Arc<SlaveReplica>> {
        self.replicas().into_iter().filter(|r| r.is_alive()).collect()
    }

    /// One sync pass of every live master and one scatter pass of every live
    /// replica; for callers that drive the cluster without threads.
    pub fn pump(&self) {
        for m in self.masters().into_iter().filter(|m| m.is_alive()) {
            m.sync_once(false);
        }
        for r in self.live_replicas() {
            let _ = r.catch_up();
        }
    }

    fn stop_worker(&self, ep: &str) {
        let w = self.workers.lock().remove(ep);
        drop(w);
    }
}

impl Spawner for LocalNodes {
    fn spawn_master(&self, _: &ShardMap, shard_id: u32) -> Result<String> {
        self.start_master(shard_id)
    }

    fn spawn_slave(&self, _: &ShardMap, shard_id: u32, replica_id: u32) -> Result<String> {
        self.start_replica(shard_id, replica_id)
    }
}

impl NodeControl for LocalNodes {
    fn kill_master(&self, shard_id: u32) -> Result<()> {
        let (ep, m) = self
            .masters
            .read()
            .get(&shard_id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no master shard {shard_id}")))?;
        m.kill();
        self.s.dir.unregister(&ep);
        self.stop_worker(&ep);
        Ok(())
    }

    fn kill_replica(&self, shard_id: u32, replica_id: u32) -> Result<()> {
        let (ep, r) = self
            .replicas
            .read()
            .get(&(shard_id, replica_id))
            .cloned()
            .ok_or_else(|| Error::Config(format!("no replica {replica_id} of slave shard {shard_id}")))?;
        r.kill();
        self.s.dir.unregister(&ep);
        self.stop_worker(&ep);
        Ok(())
    }

    fn shutdown(&self) {
        let workers: Vec<Worker> = self.workers.lock().drain().map(|(_, w)| w).collect();
        drop(workers);
    }
}

/// Spawner that forwards to a node backend chosen after the scheduler exists.
struct DeferredSpawner(RwLock<Option<Arc<dyn NodeControl>>>);

impl Spawner for DeferredSpawner {
    fn spawn_master(&self, map: &ShardMap, shard_id: u32) -> Result<String> {
        match &*self.0.read() {
            Some(b) => b.spawn_master(map, shard_id),
            None => Err(Error::ShardDown { shard_id }),
        }
    }

    fn spawn_slave(&self, map: &ShardMap, shard_id: u32, replica_id: u32) -> Result<String> {
        match &*self.0.read() {
            Some(b) => b.spawn_slave(map, shard_id, replica_id),
            None => Err(Error::ShardDown { shard_id }),
        }
    }
}

pub enum Backend {
    Local(Arc<LocalNodes>),
    Process(Arc<ProcessNodes>),
}

impl Backend {
    fn control(&self) -> Arc<dyn NodeControl> {
        match self {
            Backend::Local(n) => n.clone(),
            Backend::Process(n) => n.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub replicas_checked: usize,
    pub params_checked: usize,
    pub mismatches: Vec<String>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.replicas_checked > 0 && self.mismatches.is_empty()
    }
}

/// A running topology.
pub struct Cluster {
    pub cfg: ClusterConfig,
    pub run_dir: PathBuf,
    pub schema: Arc<ModelSchema>,
    pub clock: Arc<dyn Clock>,
    pub log: Arc<FaultyLog>,
    pub stores: CheckpointStores,
    pub dir: Arc<Directory>,
    pub registry: Arc<Registry>,
    pub scheduler: Arc<Scheduler>,
    backend: Backend,
    tick: Mutex<Option<Worker>>,
    unstall_at: Mutex<Vec<(Duration, u32)>>,
    stepped: bool,
}

/// A fresh directory for one run under `data_dir` (or the system temp dir).
pub fn new_run_dir(data_dir: &Path) -> Result<PathBuf> {
    let base = if data_dir.as_os_str().is_empty() {
        std::env::temp_dir().join("weips")
    } else {
        data_dir.to_path_buf()
    };
    std::fs::create_dir_all(&base)?;
    for i in 0.. {
        let stamp = crate::clock::unix_millis();
        let dir = base.join(format!("run-{stamp}-{}-{i}", std::process::id()));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

pub fn open_log(cfg: &ClusterConfig, run_dir: &Path) -> Result<SharedLog> {
    let n = cfg.topology.partitions;
    Ok(match cfg.log.backend {
        LogBackend::Memory => Arc::new(MemLog::with_compression(n, cfg.log.compress)),
        LogBackend::File => Arc::new(FileLog::open_with(
            run_dir.join("log"),
            &cfg.model_id,
            n,
            cfg.log.compress,
            cfg.log.fsync,
        )?),
    })
}

pub fn stores_for(run_dir: &Path) -> CheckpointStores {
    CheckpointStores::new(run_dir.join("ckpt-local"), run_dir.join("ckpt-remote"))
}

impl Cluster {
    /// Starts every component and waits until the shard map is healthy.
    /// Multi-process mode needs the path of the `weips` binary.
    pub fn start(cfg: ClusterConfig, node_exe: Option<&Path>) -> Result<Cluster> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let run_dir = new_run_dir(&cfg.data_dir)?;
        Self::start_in(cfg, run_dir, node_exe)
    }

    pub fn start_in(cfg: ClusterConfig, run_dir: PathBuf, node_exe: Option<&Path>) -> Result<Cluster> {
        let clock = cfg.clock.build();
        let stepped = clock.is_logical();
        let schema = Arc::new(cfg.model.schema()?);
        let log = Arc::new(FaultyLog::new(open_log(&cfg, &run_dir)?));
        let stores = stores_for(&run_dir);
        let dir = Arc::new(Directory::new());
        let registry = Arc::new(Registry::new(clock.clone()));
        let spawner = Arc::new(DeferredSpawner(RwLock::new(None)));
        let scheduler = Arc::new(Scheduler::new(
            registry.clone(),
            dir.clone(),
            stores.clone(),
            spawner.clone(),
            clock.clone(),
            cfg.scheduler.clone(),
        ));
        let t = cfg.topology.clone();
        scheduler.create_model(ShardMap::new(
            &cfg.model_id,
            t.masters,
            t.slaves,
            t.partitions,
            cfg.fault_tolerance,
        )?)?;

        let backend = match cfg.mode {
            RunMode::SingleProcess => Backend::Local(Arc::new(LocalNodes::new(NodeSettings {
                model_id: cfg.model_id.clone(),
                schema: schema.clone(),
                log: log.clone(),
                clock: clock.clone(),
                stores: stores.clone(),
                dir: dir.clone(),
                master: cfg.master.clone(),
                slave: cfg.slave,
                num_masters: t.masters,
                num_slaves: t.slaves,
                threaded: !stepped,
                idle: Duration::from_millis(cfg.idle_ms),
            }))),
            RunMode::MultiProcess => {
                let exe = node_exe.ok_or_else(|| Error::Config("multi-process mode needs the weips binary".into()))?;
                Backend::Process(Arc::new(ProcessNodes::new(exe, &cfg, &run_dir)?))
            }
        };
        *spawner.0.write() = Some(backend.control());

        let cluster = Cluster {
            cfg,
            run_dir,
            schema,
            clock,
            log,
            stores,
            dir,
            registry,
            scheduler,
            backend,
            tick: Mutex::new(None),
            unstall_at: Mutex::new(Vec::new()),
            stepped,
        };
        let ctl = cluster.backend.control();
        let model = cluster.cfg.model_id.clone();
        let map = cluster.scheduler.shard_map(&model)?;
        for s in 0..t.masters {
            let ep = ctl.spawn_master(&map, s)?;
            cluster.scheduler.register(&model, MemberKind::Master, s, 0, &ep)?;
        }
        for s in 0..t.slaves {
            for r in 0..t.replicas {
                let ep = ctl.spawn_slave(&map, s, r)?;
                cluster.scheduler.register(&model, MemberKind::Slave, s, r, &ep)?;
            }
        }
        if !stepped {
            let sched = cluster.scheduler.clone();
            let idle = Duration::from_millis((cluster.cfg.scheduler.probe_interval_ms / 5).clamp(1, 50));
            *cluster.tick.lock() = Some(Worker::spawn("scheduler", idle, move || {
                sched.tick();
                false
            }));
        }
        cluster.wait_healthy(Duration::from_secs(30))?;
        Ok(cluster)
    }

    pub fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    pub fn is_stepped(&self) -> bool {
        self.stepped
    }

    pub fn local(&self) -> Option<&Arc<LocalNodes>> {
        match &self.backend {
            Backend::Local(n) => Some(n),
            Backend::Process(_) => None,
        }
    }

    pub fn processes(&self) -> Option<&Arc<ProcessNodes>> {
        match &self.backend {
            Backend::Process(n) => Some(n),
            Backend::Local(_) => None,
        }
    }

    pub fn shard_map(&self) -> Result<ShardMap> {
        self.scheduler.shard_map(self.model_id())
    }

    pub fn client(&self) -> Result<ClusterClient> {
        ClusterClient::new(self.model_id(), self.registry.clone(), self.dir.clone())
    }

    pub fn wait_healthy(&self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.shard_map()?.is_healthy() {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Unavailable {
                    shard_id: 0,
                    reason: "cluster did not become healthy".into(),
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Advances a clock-driven cluster by one round: master sync, slave
    /// scatter, expired stalls and a scheduler tick. Threaded clusters only
    /// get the stall handling.
    pub fn step(&self) {
        let now = self.clock.now();
        self.unstall_at.lock().retain(|&(at, p)| {
            if now >= at {
                self.log.unstall_partition(PartitionId(p));
                false
            } else {
                true
            }
        });
        if self.stepped {
            if let Some(n) = self.local() {
                n.pump();
            }
            self.scheduler.tick();
        }
    }

    pub fn kill_master(&self, shard_id: u32) -> Result<()> {
        self.backend.control().kill_master(shard_id)
    }

    pub fn kill_replica(&self, shard_id: u32, replica_id: u32) -> Result<()> {
        self.backend.control().kill_replica(shard_id, replica_id)
    }

    /// Fails appends to `partition` for `duration` of cluster time.
    pub fn stall_partition(&self, partition: u32, duration: Duration) -> Result<()> {
        if self.processes().is_some() {
            return Err(Error::Config("log stalls are only injectable in single-process mode".into()));
        }
        if partition >= self.log.num_partitions() {
            return Err(Error::NoSuchPartition {
                partition,
                num_partitions: self.log.num_partitions(),
            });
        }
        self.log.stall_partition(PartitionId(partition));
        self.unstall_at.lock().push((self.clock.now() + duration, partition));
        Ok(())
    }

    pub fn pending_stalls(&self) -> usize {
        self.unstall_at.lock().len()
    }

    /// Corrupts one shard file of `version`, or of the newest version.
    pub fn corrupt_checkpoint(&self, version: Option<u64>, shard: u32) -> Result<u64> {
        let v = match version {
            Some(v) => v,
            None => self
                .shard_map()?
                .latest_version()
                .ok_or_else(|| Error::NoCheckpoint("nothing to corrupt".into()))?,
        };
        let dest = self
            .stores
            .locate(self.model_id(), v)
            .ok_or_else(|| Error::NoCheckpoint(format!("v{v} not found")))?;
        self.stores.get(dest).corrupt_shard(self.model_id(), v, shard)?;
        Ok(v)
    }

    /// Publishes everything pending on every live master and waits until
    /// every live replica has consumed the log to its tail.
    pub fn quiesce(&self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let Some(n) = self.local() else {
            return self.processes().expect("one backend").quiesce(timeout);
        };
        for p in 0..self.log.num_partitions() {
            self.log.unstall_partition(PartitionId(p));
        }
        self.unstall_at.lock().clear();
        loop {
            for m in n.masters().into_iter().filter(|m| m.is_alive()) {
                let _ = m.flush();
            }
            for r in n.live_replicas() {
                let _ = r.catch_up();
            }
            let tails: BTreeMap<u32, u64> = self
                .log
                .tails()?
                .into_iter()
                .enumerate()
                .map(|(p, o)| (p as u32, o.0))
                .collect();
            let idle = n.masters().iter().filter(|m| m.is_alive()).all(|m| m.pending() == 0);
            let caught_up = n.live_replicas().iter().all(|r| r.table().offsets() == tails);
            if idle && caught_up {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Unavailable {
                    shard_id: 0,
                    reason: "cluster did not quiesce".into(),
                });
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Serving-view union of all live master tables, split by slave shard.
    pub fn expected_serving(&self) -> Result<Vec<BTreeMap<u64, ParameterSlot>>> {
        let n = self
            .local()
            .ok_or_else(|| Error::Config("table inspection needs single-process mode".into()))?;
        let slaves = self.cfg.topology.slaves;
        let mut out = vec![BTreeMap::new(); slaves as usize];
        for m in n.masters().into_iter().filter(|m| m.is_alive()) {
            for (id, e) in m.table().snapshot().entries {
                out[owner(id, slaves) as usize].insert(id, transform_for_serving(&self.schema, &e.slot)?);
            }
        }
        Ok(out)
    }

    /// Compares every live replica with the master union, bit for bit.
    pub fn check_consistency(&self) -> Result<ConsistencyReport> {
        let expected = self.expected_serving()?;
        let n = self.local().expect("checked by expected_serving");
        let mut rep = ConsistencyReport::default();
        for r in n.live_replicas() {
            rep.replicas_checked += 1;
            let want = &expected[r.shard_id() as usize];
            let got = r.table().entries();
            rep.params_checked += got.len();
            if got.len() != want.len() {
                rep.mismatches.push(format!(
                    "slave {} replica {}: {} params, expected {}",
                    r.shard_id(),
                    r.replica_id(),
                    got.len(),
                    want.len()
                ));
                continue;
            }
            if let Some((id, _)) = got
                .iter()
                .find(|(id, slot)| want.get(id).is_none_or(|w| !w.bit_eq(slot)))
            {
                rep.mismatches.push(format!(
                    "slave {} replica {}: feature {id} differs",
                    r.shard_id(),
                    r.replica_id()
                ));
            }
        }
        Ok(rep)
    }

    pub fn shutdown(&self) {
        if let Some(mut w) = self.tick.lock().take() {
            w.stop();
        }
        self.backend.control().shutdown();
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}
