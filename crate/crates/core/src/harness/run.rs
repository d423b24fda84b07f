//! One experiment end to end: start, train, inject, drain, check.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::cluster::{Cluster, ConsistencyReport};
use super::config::ClusterConfig;
use super::faults::{FaultInjector, FaultPlan, InjectedFault};
use super::freshness::{measure_freshness, FreshnessStats, SENTINEL_BASE};
use super::trainer::{MetricsSink, Trainer};
use super::workload::SampleStream;
use crate::error::{Error, Result};
use crate::master::SyncStats;
use crate::monitor::MetricSample;
use crate::scheduler::Event;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub plan: Option<FaultPlan>,
    /// Probe freshness while training; training then runs until the probes finish.
    pub freshness: bool,
    pub check_consistency: bool,
    /// `weips` binary for multi-process mode.
    pub node_exe: Option<PathBuf>,
    pub quiesce_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            plan: None,
            freshness: false,
            check_consistency: true,
            node_exe: None,
            quiesce_timeout: Duration::from_secs(120),
        }
    }
}

/// Sync pipeline totals over the live masters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub gather: String,
    pub per_shard: Vec<SyncStats>,
    /// Dirty entries taken off the collectors or re-queued by recovery.
    pub drained: u64,
    pub emitted: u64,
    pub record_bytes: u64,
    /// drained / emitted; at least 1 because the gatherer only merges.
    pub dedup_ratio: f64,
}

impl SyncSummary {
    pub fn from_stats(gather: String, per_shard: Vec<SyncStats>) -> Self {
        let drained = per_shard
            .iter()
            .map(|s| s.collector.upserts_drained + s.collector.deletes_drained + s.recovery_entries)
            .sum();
        let emitted = per_shard.iter().map(|s| s.records_emitted).sum();
        let record_bytes = per_shard.iter().map(|s| s.record_bytes).sum();
        SyncSummary {
            gather,
            per_shard,
            drained,
            emitted,
            record_bytes,
            dedup_ratio: if emitted == 0 { f64::NAN } else { drained as f64 / emitted as f64 },
        }
    }

    /// Records emitted per dirty entry drained.
    pub fn emitted_fraction(&self) -> f64 {
        if self.drained == 0 {
            f64::NAN
        } else {
            self.emitted as f64 / self.drained as f64
        }
    }
}

/// Sync totals of a single-process cluster, over every master incarnation.
pub fn sync_summary(cluster: &Cluster) -> Option<SyncSummary> {
    let nodes = cluster.local()?;
    let stats = nodes.all_masters().iter().map(|m| m.stats()).collect();
    Some(SyncSummary::from_stats(cluster.cfg.master.gather.label(), stats))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub model_id: String,
    pub run_dir: PathBuf,
    pub gather: String,
    pub samples_trained: u64,
    pub wall_ms: u64,
    /// Cluster clock at the end of the run.
    pub clock_ms: u64,
    pub metrics: Vec<MetricSample>,
    pub freshness: Option<FreshnessStats>,
    pub sync: Option<SyncSummary>,
    pub events: Vec<Event>,
    pub faults: Vec<InjectedFault>,
    pub versions: Vec<u64>,
    pub active_version: Option<u64>,
    pub consistency: Option<ConsistencyReport>,
}

/// Trains on `stream` until `limit` samples (0: no limit) or `stop`.
///
/// A clock-driven cluster is trained from this thread, advancing the clock
/// by `logical_ms_per_sample` per sample and stepping after every batch.
/// A threaded cluster gets `trainer.threads` workers while this thread
/// applies due faults.
pub fn drive_training(
    cluster: &Cluster,
    sink: &Arc<MetricsSink>,
    stream: &Mutex<SampleStream>,
    limit: u64,
    stop: &AtomicBool,
    mut injector: Option<&mut FaultInjector>,
) -> Result<u64> {
    let cfg = &cluster.cfg;
    let batch_size = cfg.trainer.batch_size;
    let take = |max: usize| {
        let mut s = stream.lock();
        let n = if limit == 0 {
            max
        } else {
            (limit.saturating_sub(s.position()) as usize).min(max)
        };
        s.next_batch(n)
    };

    if cluster.is_stepped() {
        let trainer = Trainer::new(cluster.client()?, cluster.schema.clone(), sink.clone());
        let probe = Duration::from_millis(cfg.scheduler.probe_interval_ms.max(1));
        let wait = || {
            cluster.clock.advance_by(probe);
            cluster.step();
        };
        let mut done = 0u64;
        while !stop.load(Ordering::Acquire) {
            if let Some(inj) = injector.as_deref_mut() {
                inj.poll(cluster, done);
            }
            let batch = take(batch_size);
            if batch.is_empty() {
                break;
            }
            trainer.train_batch_with(&batch, &wait)?;
            done += batch.len() as u64;
            cluster
                .clock
                .advance_by(Duration::from_millis(cfg.trainer.logical_ms_per_sample * batch.len() as u64));
            cluster.step();
        }
        if let Some(inj) = injector {
            inj.poll(cluster, done);
        }
        return Ok(done);
    }

    let trained = Arc::new(AtomicU64::new(0));
    let finished = AtomicU64::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let sps = cfg.workload.samples_per_second;
    let started = Instant::now();
    let threads = cfg.trainer.threads;
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| {
                let run = || -> Result<()> {
                    let mut trainer = Trainer::new(cluster.client()?, cluster.schema.clone(), sink.clone());
                    trainer.trained = trained.clone();
                    while !stop.load(Ordering::Acquire) && first_error.lock().is_none() {
                        if sps > 0 {
                            let allowed = started.elapsed().as_secs_f64() * sps as f64;
                            if stream.lock().position() as f64 >= allowed {
                                std::thread::sleep(Duration::from_micros(500));
                                continue;
                            }
                        }
                        let batch = take(batch_size);
                        if batch.is_empty() {
                            break;
                        }
                        trainer.train_batch(&batch)?;
                    }
                    Ok(())
                };
                if let Err(e) = run() {
                    first_error.lock().get_or_insert(e);
                }
                finished.fetch_add(1, Ordering::AcqRel);
            });
        }
        while finished.load(Ordering::Acquire) < threads as u64 {
            if let Some(inj) = injector.as_deref_mut() {
                inj.poll(cluster, trained.load(Ordering::Acquire));
            }
            cluster.step();
            std::thread::sleep(Duration::from_millis(1));
        }
        if let Some(inj) = injector {
            inj.poll(cluster, trained.load(Ordering::Acquire));
        }
    });
    match first_error.into_inner() {
        Some(e) => Err(e),
        None => Ok(trained.load(Ordering::Acquire)),
    }
}

/// Starts a cluster from `cfg` and runs one experiment on it.
pub fn run_experiment(cfg: ClusterConfig, opts: &RunOptions) -> Result<RunArtifacts> {
    let cluster = Cluster::start(cfg, opts.node_exe.as_deref())?;
    let out = run_on(&cluster, opts);
    cluster.shutdown();
    out
}

pub fn run_on(cluster: &Cluster, opts: &RunOptions) -> Result<RunArtifacts> {
    let cfg = &cluster.cfg;
    if opts.freshness && cluster.is_stepped() {
        return Err(Error::Config("freshness is measured on the wall clock".into()));
    }
    let mut injector = match &opts.plan {
        Some(plan) => {
            plan.validate(cfg)?;
            Some(FaultInjector::new(plan.clone()))
        }
        None => None,
    };
    let sink = Arc::new(MetricsSink::new(
        cluster.model_id(),
        cfg.scheduler.trigger.window_size,
        cluster.registry.clone(),
        cluster.clock.clone(),
    ));
    let stream = Mutex::new(SampleStream::new(cfg.workload.clone())?);
    let stop = AtomicBool::new(false);
    let started = Instant::now();

    let (trained, freshness) = if opts.freshness {
        let pusher = cluster.client()?;
        let poller = cluster.client()?;
        std::thread::scope(|s| {
            let probes = s.spawn(|| {
                let r = measure_freshness(
                    &cfg.master.gather.label(),
                    &pusher,
                    &poller,
                    &cluster.schema,
                    &cfg.freshness,
                    SENTINEL_BASE,
                );
                stop.store(true, Ordering::Release);
                r
            });
            let trained = drive_training(cluster, &sink, &stream, 0, &stop, injector.as_mut());
            stop.store(true, Ordering::Release);
            let fresh = probes.join().expect("freshness prober panicked");
            Ok::<_, Error>((trained?, Some(fresh?)))
        })?
    } else {
        let n = drive_training(cluster, &sink, &stream, cfg.trainer.samples, &stop, injector.as_mut())?;
        (n, None)
    };

    cluster.quiesce(opts.quiesce_timeout)?;
    let consistency = if opts.check_consistency && cluster.local().is_some() {
        Some(cluster.check_consistency()?)
    } else {
        None
    };
    let map = cluster.shard_map()?;
    Ok(RunArtifacts {
        model_id: cluster.model_id().into(),
        run_dir: cluster.run_dir.clone(),
        gather: cfg.master.gather.label(),
        samples_trained: trained,
        wall_ms: started.elapsed().as_millis() as u64,
        clock_ms: cluster.clock.now().as_millis() as u64,
        metrics: sink.history(),
        freshness,
        sync: sync_summary(cluster),
        events: cluster.scheduler.events(),
        faults: injector.map(|i| i.injected().to_vec()).unwrap_or_default(),
        versions: map.version_numbers(),
        active_version: map.active_version,
        consistency,
    })
}
