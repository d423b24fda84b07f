use std::sync::atomic::AtomicBool;
use std::time::Duration;

use parking_lot::Mutex;

use super::*;
use crate::clock::ClockMode;
use crate::harness::run::drive_training;
use crate::harness::trainer::MetricsSink;
use crate::harness::workload::SampleStream;
use crate::harness::{Cluster, ClusterConfig};
use crate::master::CheckpointDest;

fn config(dir: &std::path::Path, masters: u32, slaves: u32, replicas: u32, partitions: u32) -> ClusterConfig {
    let mut cfg = ClusterConfig::default();
    cfg.clock = ClockMode::Logical;
    cfg.data_dir = dir.to_path_buf();
    cfg.topology.masters = masters;
    cfg.topology.slaves = slaves;
    cfg.topology.replicas = replicas;
    cfg.topology.partitions = partitions;
    cfg.fault_tolerance.local_interval_ms = 0;
    cfg.fault_tolerance.remote_interval_ms = 0;
    cfg.scheduler.auto_downgrade = false;
    cfg.workload.num_features = 2_000;
    cfg.trainer.batch_size = 50;
    cfg
}

fn start(cfg: ClusterConfig) -> Cluster {
    Cluster::start(cfg, None).unwrap()
}

struct Feed {
    stream: Mutex<SampleStream>,
    sink: Arc<MetricsSink>,
}

impl Feed {
    fn new(c: &Cluster) -> Self {
        Feed {
            stream: Mutex::new(SampleStream::new(c.cfg.workload.clone()).unwrap()),
            sink: Arc::new(MetricsSink::new(c.model_id(), 1000, c.registry.clone(), c.clock.clone())),
        }
    }

    fn train(&self, c: &Cluster, n: u64) {
        let limit = self.stream.lock().position() + n;
        drive_training(c, &self.sink, &self.stream, limit, &AtomicBool::new(false), None).unwrap();
    }
}

/// Advances the logical clock in probe-sized steps.
fn advance(c: &Cluster, ms: u64) {
    let step = c.cfg.scheduler.probe_interval_ms;
    for _ in 0..ms.div_ceil(step) {
        c.clock.advance_by(Duration::from_millis(step));
        c.step();
    }
}

fn kinds(c: &Cluster) -> Vec<String> {
    c.scheduler.events().into_iter().map(|e| e.kind).collect()
}

#[test]
fn duplicate_registration_and_lease_expiry() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 1, 1, 2, 1));
    let map = c.shard_map().unwrap();
    let ep = map.slaves[0].replicas[0].endpoint.clone();
    assert!(matches!(
        c.scheduler.register("ctr", MemberKind::Slave, 0, 0, &ep),
        Err(Error::AlreadyRegistered(_))
    ));

    c.kill_replica(0, 1).unwrap();
    advance(&c, 1_500);
    let g = &c.shard_map().unwrap().slaves[0];
    assert_eq!(g.healthy().map(|r| r.replica_id).collect::<Vec<_>>(), [0]);
    advance(&c, 2_500);
    let g = &c.shard_map().unwrap().slaves[0];
    assert_eq!(g.replicas.len(), 1);
    let k = kinds(&c);
    assert!(k.contains(&"replica-down".into()) && k.contains(&"lease-expired".into()));
    assert!(c.registry.list("ctr/members/slave/").len() == 1);
}

#[test]
fn checkpoint_is_all_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 2, 1, 1, 1));
    let feed = Feed::new(&c);
    feed.train(&c, 1_000);
    let (v1, metas) = c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap();
    assert_eq!(metas.len(), 2);

    // Shard 1 dies before the scheduler notices.
    c.kill_master(1).unwrap();
    assert!(c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).is_err());
    let map = c.shard_map().unwrap();
    assert_eq!(map.version_numbers(), [v1]);
    assert!(c.stores.locate("ctr", v1 + 1).is_none());
    assert!(matches!(
        c.scheduler.switch_version("ctr", v1 + 1),
        Err(Error::IncompleteCheckpoint { .. })
    ));
}

#[test]
fn concurrent_schedulers_allocate_distinct_versions() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 2, 1, 1, 1));
    Feed::new(&c).train(&c, 500);
    let other = Scheduler::new(
        c.registry.clone(),
        c.dir.clone(),
        c.stores.clone(),
        Arc::new(NoSpawner),
        c.clock.clone(),
        c.cfg.scheduler.clone(),
    );
    let mut got: Vec<u64> = std::thread::scope(|s| {
        let a = s.spawn(|| {
            (0..3)
                .map(|_| c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap().0)
                .collect::<Vec<_>>()
        });
        let b = s.spawn(|| {
            (0..3)
                .map(|_| other.trigger_checkpoints("ctr", CheckpointDest::RemoteSim).unwrap().0)
                .collect::<Vec<_>>()
        });
        let mut v = a.join().unwrap();
        v.extend(b.join().unwrap());
        v
    });
    got.sort_unstable();
    got.dedup();
    assert_eq!(got.len(), 6);
    assert_eq!(c.shard_map().unwrap().version_numbers(), got);
}

#[test]
fn master_failover_restores_only_its_slice() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 2, 2, 1, 2));
    let feed = Feed::new(&c);
    feed.train(&c, 2_000);
    let (v, _) = c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap();
    feed.train(&c, 1_000);

    let nodes = c.local().unwrap().clone();
    let survivor = nodes.master(0).unwrap();
    let before_id = survivor.instance_id();
    let before = survivor.table().snapshot().entries;
    let dead_id = nodes.master(1).unwrap().instance_id();

    c.kill_master(1).unwrap();
    advance(&c, 2_000);
    let map = c.shard_map().unwrap();
    assert!(map.is_healthy());
    let fresh = nodes.master(1).unwrap();
    assert_ne!(fresh.instance_id(), dead_id);
    assert_eq!(nodes.master(0).unwrap().instance_id(), before_id);
    assert_eq!(nodes.master(0).unwrap().table().snapshot().entries, before);

    let (_, slice) = c
        .stores
        .get(CheckpointDest::Local)
        .load_slice("ctr", v, 1, 2, crate::exec::Exec::Sequential)
        .unwrap();
    assert_eq!(fresh.table().snapshot().entries, slice.entries);
    assert!(kinds(&c).contains(&"master-failover".into()));

    feed.train(&c, 500);
    c.quiesce(Duration::from_secs(30)).unwrap();
    assert!(c.check_consistency().unwrap().passed());
}

#[test]
fn master_without_checkpoint_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 1, 1, 1, 1));
    Feed::new(&c).train(&c, 200);
    c.kill_master(0).unwrap();
    advance(&c, 2_000);
    let map = c.shard_map().unwrap();
    assert!(map.masters[0].failed && !map.masters[0].healthy);
    assert!(map.flagged.is_some());
    assert!(kinds(&c).contains(&"master-unrecoverable".into()));
    assert!(c.client().unwrap().push(&[]).is_ok());
    assert!(matches!(map.master_endpoint(0), Err(Error::ShardDown { .. })));
}

#[test]
fn lost_replica_is_bootstrapped_and_converges() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 2, 2, 1, 2));
    let feed = Feed::new(&c);
    feed.train(&c, 1_500);
    c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap();
    feed.train(&c, 1_500);

    c.kill_replica(1, 0).unwrap();
    advance(&c, 2_000);
    let g = &c.shard_map().unwrap().slaves[1];
    assert_eq!(g.replicas.iter().map(|r| (r.replica_id, r.healthy)).collect::<Vec<_>>(), [(1, true)]);
    assert!(kinds(&c).contains(&"replica-bootstrap".into()));

    feed.train(&c, 500);
    c.quiesce(Duration::from_secs(30)).unwrap();
    let rep = c.check_consistency().unwrap();
    assert!(rep.passed(), "{:?}", rep.mismatches);
    assert_eq!(rep.replicas_checked, 2);
}

#[test]
fn switch_loads_snapshot_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 1, 2, 2, 1));
    let feed = Feed::new(&c);
    feed.train(&c, 1_000);
    let (v1, _) = c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap();
    feed.train(&c, 1_000);
    c.scheduler.trigger_checkpoints("ctr", CheckpointDest::RemoteSim).unwrap();
    c.quiesce(Duration::from_secs(30)).unwrap();

    assert_eq!(c.scheduler.switch_version("ctr", v1).unwrap(), v1);
    let map = c.shard_map().unwrap();
    assert_eq!(map.active_version, Some(v1));
    assert!(map.is_healthy());
    for r in c.local().unwrap().live_replicas() {
        assert_eq!(r.table().version(), v1);
    }
    assert!(c.check_consistency().unwrap().passed());
}

#[test]
fn degraded_metrics_trigger_a_downgrade() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1, 1, 2, 1);
    cfg.scheduler.auto_downgrade = true;
    let c = start(cfg);
    Feed::new(&c).train(&c, 300);
    let (v1, _) = c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap();
    let (v2, _) = c.scheduler.trigger_checkpoints("ctr", CheckpointDest::Local).unwrap();
    let window = |id: u64, version: u64, logloss: f64| MetricSample {
        window_id: id,
        version,
        count: 1000,
        logloss,
        auc: Some(0.7),
        timestamp_ms: id,
    };
    for id in 0..20 {
        c.scheduler.publish_metric("ctr", &window(id, v1, 0.5)).unwrap();
    }
    c.step();
    assert_eq!(c.shard_map().unwrap().active_version, None);
    for id in 20..26 {
        c.scheduler.publish_metric("ctr", &window(id, v2, 0.9)).unwrap();
    }
    c.step();
    let map = c.shard_map().unwrap();
    assert_eq!(map.active_version, Some(v1));
    assert_eq!(map.metrics_after_window, Some(25));
    assert!(kinds(&c).contains(&"downgrade".into()));
    // The baseline restarts, so the same history does not fire again.
    c.step();
    assert_eq!(kinds(&c).iter().filter(|k| *k == "downgrade").count(), 1);
}

#[test]
fn jitter_is_bounded_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let c = start(config(dir.path(), 1, 1, 1, 1));
    let make = || {
        Scheduler::new(
            c.registry.clone(),
            c.dir.clone(),
            c.stores.clone(),
            Arc::new(NoSpawner),
            c.clock.clone(),
            c.cfg.scheduler.clone(),
        )
    };
    let max = Duration::from_millis(50);
    let a = make().draw_jitter(200, max);
    assert_eq!(a, make().draw_jitter(200, max));
    assert!(a.iter().all(|d| *d <= max));
    assert!(a.iter().any(|d| *d != a[0]));
    assert!(make().draw_jitter(3, Duration::ZERO).iter().all(|d| d.is_zero()));
}
