//! Training-side shard.
//!
//! Gradient pushes update the [`FeatureTable`] and drop dirty ids into the
//! [`Collector`]. [`MasterShard::sync_once`] drains them through the
//! [`Gatherer`], reads full current values and appends one framed batch to
//! the shard's log partition. Checkpoints snapshot the table together with
//! the log tails.

mod checkpoint;
mod collector;
mod filter;
mod gather;
mod table;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_body, encode_body, reshard, CheckpointDest, CheckpointMeta, CheckpointStore,
    CheckpointStores,
    VersionManifest,
};
pub use collector::{Collector, CollectorStats, DirtyEntry, DEFAULT_COLLECTOR_CAPACITY};
pub use filter::{select_victims, FilterPolicy};
pub use gather::{materialize, GatherConfig, Gatherer};
pub use table::{owner, FeatureTable, TableEntry, TableSnapshot};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{apply_gradients, ModelSchema, ParameterSlot};
use crate::plog::{codec, partition_for_shard, LogStore, Offset, PartitionId, SharedLog, UpdateOp, UpdateRecord};

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

/// Unique id for a shard incarnation; a restarted shard gets a new one.
pub fn next_instance_id() -> u64 {
    NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 2,
            max_delay_ms: 100,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub gather: GatherConfig,
    pub collector_capacity: usize,
    pub retry: RetryPolicy,
    /// Records per appended frame.
    pub max_frame_records: usize,
    pub exec: Exec,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            gather: GatherConfig::Realtime,
            collector_capacity: DEFAULT_COLLECTOR_CAPACITY,
            retry: RetryPolicy::default(),
            max_frame_records: 4096,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PushAck {
    pub applied: usize,
    /// Features whose update was rejected, with the reason.
    pub rejected: Vec<(u64, String)>,
    pub epoch: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub drained: usize,
    pub emitted: usize,
    pub last_offset: Option<u64>,
    pub stalled: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncStats {
    pub collector: CollectorStats,
    pub records_emitted: u64,
    pub upserts_emitted: u64,
    pub deletes_emitted: u64,
    /// Encoded record bytes before compression.
    pub record_bytes: u64,
    pub appends: u64,
    pub append_failures: u64,
    pub emissions: u64,
    pub pending: usize,
    /// Ids re-queued for publication by checkpoint recovery.
    #[serde(default)]
    pub recovery_entries: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterHealth {
    pub model_id: String,
    pub shard_id: u32,
    pub instance_id: u64,
    pub alive: bool,
    pub sync_stalled: bool,
    pub params: usize,
    pub epoch: u64,
    /// Dirty ids not yet published.
    pub pending: usize,
}

#[derive(Default)]
struct Counters {
    records: AtomicU64,
    upserts: AtomicU64,
    deletes: AtomicU64,
    bytes: AtomicU64,
    appends: AtomicU64,
    failures: AtomicU64,
    emissions: AtomicU64,
    recovered: AtomicU64,
}

/// Appends `records` to `partition` in frames of at most `chunk` records,
/// retrying each frame with exponential backoff. Duplicated frames are
/// harmless because records carry full values.
pub fn push_to_log(
    log: &dyn LogStore,
    partition: PartitionId,
    records: &[UpdateRecord],
    retry: &RetryPolicy,
    chunk: usize,
) -> Result<Option<Offset>> {
    let mut last = None;
    for frame in records.chunks(chunk.max(1)) {
        let mut attempt = 0;
        loop {
            match log.append(partition, frame) {
                Ok(o) => {
                    last = Some(o);
                    break;
                }
                Err(e) => {
                    attempt += 1;
                    if attempt >= retry.max_attempts.max(1) {
                        return Err(e);
                    }
                    std::thread::sleep(retry.delay(attempt - 1));
                }
            }
        }
    }
    Ok(last)
}

/// One master shard of one model.
pub struct MasterShard {
    model_id: Arc<str>,
    instance_id: u64,
    table: FeatureTable,
    collector: Collector,
    gatherer: Mutex<Gatherer>,
    log: SharedLog,
    partition: PartitionId,
    clock: Arc<dyn Clock>,
    cfg: MasterConfig,
    counters: Counters,
    alive: AtomicBool,
    stalled: AtomicBool,
}

impl MasterShard {
    pub fn new(
        model_id: &str,
        shard_id: u32,
        num_shards: u32,
        schema: Arc<ModelSchema>,
        log: SharedLog,
        clock: Arc<dyn Clock>,
        cfg: MasterConfig,
    ) -> Result<Self> {
        cfg.gather.validate()?;
        if num_shards == 0 || shard_id >= num_shards {
            return Err(Error::Config(format!("shard {shard_id} of {num_shards}")));
        }
        let now = clock.now();
        Ok(MasterShard {
            model_id: Arc::from(model_id),
            instance_id: next_instance_id(),
            table: FeatureTable::new(shard_id, num_shards, schema),
            collector: Collector::new(cfg.collector_capacity),
            gatherer: Mutex::new(Gatherer::new(cfg.gather, now)),
            partition: partition_for_shard(shard_id, log.num_partitions()),
            log,
            clock,
            cfg,
            counters: Counters::default(),
            alive: AtomicBool::new(true),
            stalled: AtomicBool::new(false),
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn shard_id(&self) -> u32 {
        self.table.shard_id()
    }

    pub fn num_shards(&self) -> u32 {
        self.table.num_shards()
    }

    pub fn instance_id(&self) -> u64 {
        self.instance_id
    }

    pub fn partition(&self) -> PartitionId {
        self.partition
    }

    pub fn table(&self) -> &FeatureTable {
        &self.table
    }

    pub fn schema(&self) -> &Arc<ModelSchema> {
        self.table.schema()
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn config(&self) -> &MasterConfig {
        &self.cfg
    }

    /// Simulated crash: every later request fails as unavailable.
    pub fn kill(&self) {
        self.alive.store(false, Ordering::Release);
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    pub fn is_sync_stalled(&self) -> bool {
        self.stalled.load(Ordering::Acquire)
    }

    fn check_request(&self, model_id: &str) -> Result<()> {
        if !self.is_alive() {
            return Err(Error::Unavailable {
                shard_id: self.shard_id(),
                reason: "master shard is down".into(),
            });
        }
        if model_id != &*self.model_id {
            return Err(Error::ModelMismatch {
                expected: self.model_id.to_string(),
                got: model_id.to_string(),
            });
        }
        Ok(())
    }

    /// Applies per-feature gradients; each touched id becomes one dirty entry.
    pub fn push_gradients(&self, model_id: &str, updates: &[(u64, ParameterSlot)]) -> Result<PushAck> {
        self.check_request(model_id)?;
        for (id, _) in updates {
            self.table.check_owned(*id)?;
        }
        let schema = self.table.schema().clone();
        let apply = |(id, grad): &(u64, ParameterSlot)| {
            let r = self.table.update(*id, |slot| apply_gradients(&schema, slot, grad, *id));
            if r.is_ok() {
                self.collector.collect(DirtyEntry::upsert(*id));
            }
            r.map_err(|e| (*id, e.to_string()))
        };
        let distinct = updates.iter().map(|u| u.0).collect::<HashSet<_>>().len() == updates.len();
        // Repeated ids must apply in request order.
        let exec = if distinct { self.cfg.exec } else { Exec::Sequential };
        let results = exec.map(updates, apply);
        let mut ack = PushAck::default();
        for r in results {
            match r {
                Ok(_) => ack.applied += 1,
                Err(rej) => ack.rejected.push(rej),
            }
        }
        ack.epoch = self.table.epoch();
        Ok(ack)
    }

    /// Training-view slots; absent ids come back as the slot a first push starts from.
    pub fn pull_parameters(&self, model_id: &str, ids: &[u64]) -> Result<Vec<(u64, ParameterSlot)>> {
        self.check_request(model_id)?;
        for id in ids {
            self.table.check_owned(*id)?;
        }
        Ok(ids
            .iter()
            .map(|&id| {
                let slot = match self.table.get(id) {
                    Some(e) => e.slot,
                    None => self.table.schema().initial_slot(id),
                };
                (id, slot)
            })
            .collect())
    }

    /// Drains the collector and, when the gather mode fires (or `force`),
    /// publishes full values. On persistent log failure the ids stay pending
    /// and the shard reports itself stalled; training is unaffected.
    pub fn sync_once(&self, force: bool) -> SyncReport {
        let mut g = self.gatherer.lock();
        let drained = self.collector.drain();
        g.absorb(&drained);
        let mut report = SyncReport {
            drained: drained.len(),
            ..Default::default()
        };
        let Some(ids) = g.take_ready(self.clock.now(), force) else {
            report.stalled = self.is_sync_stalled();
            return report;
        };
        let records = materialize(&ids, &self.table, &self.model_id, self.cfg.exec);
        match push_to_log(&*self.log, self.partition, &records, &self.cfg.retry, self.cfg.max_frame_records) {
            Ok(last) => {
                let c = &self.counters;
                let ups = records.iter().filter(|r| r.op == UpdateOp::Upsert).count() as u64;
                let bytes: usize = records.iter().map(codec::record_len).sum();
                c.records.fetch_add(records.len() as u64, Ordering::Relaxed);
                c.upserts.fetch_add(ups, Ordering::Relaxed);
                c.deletes.fetch_add(records.len() as u64 - ups, Ordering::Relaxed);
                c.bytes.fetch_add(bytes as u64, Ordering::Relaxed);
                c.appends.fetch_add(records.len().div_ceil(self.cfg.max_frame_records.max(1)) as u64, Ordering::Relaxed);
                c.emissions.fetch_add(1, Ordering::Relaxed);
                self.stalled.store(false, Ordering::Release);
                report.emitted = records.len();
                report.last_offset = last.map(|o| o.0);
            }
            Err(_) => {
                self.counters.failures.fetch_add(1, Ordering::Relaxed);
                g.restore(ids);
                self.stalled.store(true, Ordering::Release);
                report.stalled = true;
            }
        }
        report
    }

    /// Forces emissions until nothing is pending or the log refuses.
    pub fn flush(&self) -> Result<()> {
        loop {
            let r = self.sync_once(true);
            if r.stalled {
                return Err(Error::AppendFailed {
                    partition: self.partition.0,
                    reason: "log unavailable while flushing".into(),
                });
            }
            if self.collector.is_empty() && self.gatherer.lock().pending_len() == 0 {
                return Ok(());
            }
        }
    }

    pub fn pending(&self) -> usize {
        self.gatherer.lock().pending_len() + self.collector.len()
    }

    /// Evicts features per `policy`; evicted ids flow to slaves as DELETEs.
    pub fn filter_features(&self, policy: &FilterPolicy) -> Vec<DirtyEntry> {
        let victims = select_victims(&self.table.epochs(), self.table.epoch(), policy);
        let mut out = Vec::with_capacity(victims.len());
        for (epoch, id) in victims {
            if self.table.remove_if_epoch(id, epoch) {
                let e = DirtyEntry::delete(id);
                self.collector.collect(e);
                out.push(e);
            }
        }
        out
    }

    pub fn stats(&self) -> SyncStats {
        let c = &self.counters;
        SyncStats {
            collector: self.collector.stats(),
            records_emitted: c.records.load(Ordering::Relaxed),
            upserts_emitted: c.upserts.load(Ordering::Relaxed),
            deletes_emitted: c.deletes.load(Ordering::Relaxed),
            record_bytes: c.bytes.load(Ordering::Relaxed),
            appends: c.appends.load(Ordering::Relaxed),
            append_failures: c.failures.load(Ordering::Relaxed),
            emissions: c.emissions.load(Ordering::Relaxed),
            pending: self.pending(),
            recovery_entries: c.recovered.load(Ordering::Relaxed),
        }
    }

    pub fn health(&self) -> MasterHealth {
        MasterHealth {
            model_id: self.model_id.to_string(),
            shard_id: self.shard_id(),
            instance_id: self.instance_id,
            alive: self.is_alive(),
            sync_stalled: self.is_sync_stalled(),
            params: self.table.len(),
            epoch: self.table.epoch(),
            pending: self.pending(),
        }
    }

    /// Takes the snapshot (updates pause only for the copy) and writes it on
    /// a background thread.
    pub fn begin_checkpoint(&self, store: CheckpointStore, version: u64) -> Result<PendingCheckpoint> {
        self.check_request(&self.model_id.clone())?;
        let started = Instant::now();
        let (snap, tails) = self.table.snapshot_with(|| self.log.tails());
        let pause = started.elapsed();
        let log_offsets = tails?
            .into_iter()
            .enumerate()
            .map(|(p, o)| (p as u32, o.0))
            .collect();
        let model = self.model_id.to_string();
        let kind = self.table.schema().kind();
        let handle = std::thread::Builder::new()
            .name(format!("ckpt-{model}-{}", snap.shard_id))
            .spawn(move || store.write_shard(&model, version, kind, &snap, log_offsets))?;
        Ok(PendingCheckpoint { handle, pause })
    }

    pub fn save_checkpoint(&self, store: CheckpointStore, version: u64) -> Result<CheckpointMeta> {
        self.begin_checkpoint(store, version)?.wait()
    }

    /// Reloads this shard's slice of `version` and re-publishes it.
    ///
    /// Every resident id is re-emitted as an UPSERT, and ids this shard
    /// published after the checkpoint that are no longer resident are
    /// emitted as DELETEs, so slaves converge to the restored state.
    pub fn recover(&self, store: &CheckpointStore, version: u64) -> Result<RecoveryReport> {
        let (manifest, snap) = store.load_slice(
            &self.model_id,
            version,
            self.shard_id(),
            self.num_shards(),
            self.cfg.exec,
        )?;
        let from = if manifest.num_shards == self.num_shards() {
            manifest.shards[self.shard_id() as usize]
                .log_offsets
                .get(&self.partition.0)
                .copied()
        } else {
            manifest.replay_offsets().get(&self.partition.0).copied()
        }
        .unwrap_or(0);

        let mut g = self.gatherer.lock();
        self.collector.drain();
        g.take_ready(self.clock.now(), true);
        self.table.replace_all(snap.entries, snap.epoch)?;

        let mut orphaned = HashSet::new();
        let mut at = Offset(from);
        loop {
            let batch = self.log.read_from(self.partition, at, 8192)?;
            let Some((last, _)) = batch.last() else { break };
            at = Offset(last.0 + 1);
            for (_, r) in batch {
                if r.source_shard == self.shard_id()
                    && *r.model_id == *self.model_id
                    && !self.table.contains(r.feature_id)
                {
                    orphaned.insert(r.feature_id);
                }
            }
        }
        let resident = self.table.ids();
        let mut entries: Vec<DirtyEntry> = resident.iter().map(|&id| DirtyEntry::upsert(id)).collect();
        let mut orphaned: Vec<u64> = orphaned.into_iter().collect();
        orphaned.sort_unstable();
        entries.extend(orphaned.iter().map(|&id| DirtyEntry::delete(id)));
        g.absorb(&entries);
        drop(g);
        self.counters.recovered.fetch_add(entries.len() as u64, Ordering::Relaxed);
        self.alive.store(true, Ordering::Release);
        Ok(RecoveryReport {
            version,
            restored: resident.len(),
            deleted: orphaned.len(),
            scanned_from: from,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub version: u64,
    pub restored: usize,
    pub deleted: usize,
    pub scanned_from: u64,
}

/// Checkpoint body being written off the update path.
pub struct PendingCheckpoint {
    handle: JoinHandle<Result<CheckpointMeta>>,
    pause: Duration,
}

impl PendingCheckpoint {
    /// How long updates were held while the snapshot was copied.
    pub fn pause(&self) -> Duration {
        self.pause
    }

    pub fn wait(self) -> Result<CheckpointMeta> {
        self.handle
            .join()
            .map_err(|_| Error::CheckpointFailed("writer thread panicked".into()))?
    }
}
