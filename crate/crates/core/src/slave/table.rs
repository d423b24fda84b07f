use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::hook::TransformHook;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::master::owner;
use crate::model::{ModelSchema, ParameterSlot, View};
use crate::plog::{LogStore, Offset, PartitionId, UpdateOp, UpdateRecord};

const STRIPES: usize = 64;

type Stripe = HashMap<u64, Arc<ParameterSlot>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub read: usize,
    pub applied: usize,
    pub skipped: usize,
    pub quarantined: usize,
}

impl ScatterReport {
    fn add(&mut self, o: ScatterReport) {
        self.read += o.read;
        self.applied += o.applied;
        self.skipped += o.skipped;
        self.quarantined += o.quarantined;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingCounters {
    pub applied: u64,
    pub skipped: u64,
    pub quarantined: u64,
}

/// Serving-view parameters owned by one slave shard, plus how far each log
/// partition has been consumed.
///
/// Slots are replaced whole behind an `Arc`, so a reader sees either the old
/// or the new value of a feature, never a mix.
pub struct ServingTable {
    model_id: Arc<str>,
    shard_id: u32,
    num_shards: u32,
    version: u64,
    schema: Arc<ModelSchema>,
    stripes: Box<[RwLock<Stripe>]>,
    /// Next offset to read per partition; the mutex makes each partition single-consumer.
    offsets: Box<[Mutex<u64>]>,
    applied: AtomicU64,
    skipped: AtomicU64,
    quarantined: AtomicU64,
}

impl ServingTable {
    pub fn new(
        model_id: &str,
        shard_id: u32,
        num_shards: u32,
        schema: Arc<ModelSchema>,
        num_partitions: u32,
    ) -> Self {
        assert!(num_shards >= 1 && shard_id < num_shards);
        ServingTable {
            model_id: Arc::from(model_id),
            shard_id,
            num_shards,
            version: 0,
            schema,
            stripes: (0..STRIPES).map(|_| RwLock::default()).collect(),
            offsets: (0..num_partitions).map(|_| Mutex::new(0)).collect(),
            applied: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
            quarantined: AtomicU64::new(0),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn num_shards(&self) -> u32 {
        self.num_shards
    }

    /// Checkpoint version this table was bootstrapped from (0 = empty start).
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn schema(&self) -> &Arc<ModelSchema> {
        &self.schema
    }

    pub fn num_partitions(&self) -> u32 {
        self.offsets.len() as u32
    }

    fn stripe(&self, id: u64) -> &RwLock<Stripe> {
        let k = id / u64::from(self.num_shards);
        &self.stripes[(k % STRIPES as u64) as usize]
    }

    pub fn owns(&self, id: u64) -> bool {
        owner(id, self.num_shards) == self.shard_id
    }

    pub fn check_owned(&self, id: u64) -> Result<()> {
        if self.owns(id) {
            Ok(())
        } else {
            Err(Error::Routing {
                feature_id: id,
                shard_id: self.shard_id,
                num_shards: self.num_shards,
            })
        }
    }

    pub fn get(&self, id: u64) -> Option<Arc<ParameterSlot>> {
        self.stripe(id).read().get(&id).cloned()
    }

    pub fn len(&self) -> usize {
        self.stripes.iter().map(|s| s.read().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, id: u64, slot: ParameterSlot) {
        self.stripe(id).write().insert(id, Arc::new(slot));
    }

    pub fn remove(&self, id: u64) -> bool {
        self.stripe(id).write().remove(&id).is_some()
    }

    /// Serving slots for `ids`; absent ids are zero slots.
    pub fn pull(&self, ids: &[u64]) -> Result<Vec<(u64, ParameterSlot)>> {
        for id in ids {
            self.check_owned(*id)?;
        }
        Ok(ids
            .iter()
            .map(|&id| {
                let slot = match self.get(id) {
                    Some(s) => (*s).clone(),
                    None => self.schema.zero_slot(View::Serving),
                };
                (id, slot)
            })
            .collect())
    }

    pub fn offsets(&self) -> BTreeMap<u32, u64> {
        self.offsets
            .iter()
            .enumerate()
            .map(|(p, o)| (p as u32, *o.lock()))
            .collect()
    }

    pub fn set_offsets(&self, offsets: &BTreeMap<u32, u64>) {
        for (p, o) in offsets {
            if let Some(slot) = self.offsets.get(*p as usize) {
                *slot.lock() = *o;
            }
        }
    }

    pub fn counters(&self) -> ServingCounters {
        ServingCounters {
            applied: self.applied.load(Ordering::Relaxed),
            skipped: self.skipped.load(Ordering::Relaxed),
            quarantined: self.quarantined.load(Ordering::Relaxed),
        }
    }

    /// Applies one record if this shard owns it. Returns `Ok(false)` when skipped.
    pub fn apply(&self, rec: &UpdateRecord, hook: &dyn TransformHook) -> Result<bool> {
        if *rec.model_id != *self.model_id || !self.owns(rec.feature_id) {
            return Ok(false);
        }
        match rec.op {
            UpdateOp::Upsert => {
                let slot = hook.transform(&self.schema, rec)?;
                self.schema.validate_slot(&slot, View::Serving)?;
                self.insert(rec.feature_id, slot);
            }
            // Absent ids are fine: deliveries are at-least-once.
            UpdateOp::Delete => {
                self.remove(rec.feature_id);
            }
        }
        Ok(true)
    }

    fn consume_partition(
        &self,
        log: &dyn LogStore,
        p: u32,
        max_batch: usize,
        until: Option<u64>,
        hook: &dyn TransformHook,
    ) -> Result<ScatterReport> {
        let mut next = self.offsets[p as usize].lock();
        let max_batch = match until {
            Some(end) => max_batch.min(end.saturating_sub(*next) as usize),
            None => max_batch,
        };
        if max_batch == 0 {
            return Ok(ScatterReport::default());
        }
        let owns = |id: u64| self.owns(id);
        let batch = log.read_from_where(PartitionId(p), Offset(*next), max_batch, &owns).map_err(|e| match e {
            Error::OffsetOutOfRange { partition, start, tail } => Error::RecoveryNeeded(format!(
                "slave {} partition {partition}: consumed offset {start} beyond tail {tail}",
                self.shard_id
            )),
            other => other,
        })?;
        let mut rep = ScatterReport {
            read: batch.len(),
            ..Default::default()
        };
        for (off, rec) in &batch {
            let Some(rec) = rec else {
                rep.skipped += 1;
                *next = off.0 + 1;
                continue;
            };
            match self.apply(rec, hook) {
                Ok(true) => rep.applied += 1,
                Ok(false) => rep.skipped += 1,
                Err(_) => rep.quarantined += 1,
            }
            *next = off.0 + 1;
        }
        self.applied.fetch_add(rep.applied as u64, Ordering::Relaxed);
        self.skipped.fetch_add(rep.skipped as u64, Ordering::Relaxed);
        self.quarantined.fetch_add(rep.quarantined as u64, Ordering::Relaxed);
        Ok(rep)
    }

    /// Reads up to `max_batch` records from every partition at its consumed
    /// offset and applies the ones routed here. Partitions run in parallel;
    /// records within a partition are applied in offset order.
    pub fn scatter_step(
        &self,
        log: &dyn LogStore,
        max_batch: usize,
        hook: &dyn TransformHook,
        exec: Exec,
    ) -> Result<ScatterReport> {
        self.scatter_bounded(log, max_batch, None, hook, exec)
    }

    fn scatter_bounded(
        &self,
        log: &dyn LogStore,
        max_batch: usize,
        until: Option<&BTreeMap<u32, u64>>,
        hook: &dyn TransformHook,
        exec: Exec,
    ) -> Result<ScatterReport> {
        let n = self.num_partitions().min(log.num_partitions());
        let parts = exec.map_range(n as usize, |p| {
            let end = until.map(|u| u.get(&(p as u32)).copied().unwrap_or(0));
            self.consume_partition(log, p as u32, max_batch, end, hook)
        });
        let mut total = ScatterReport::default();
        for r in parts {
            total.add(r?);
        }
        Ok(total)
    }

    /// Scatters until every partition's consumed offset reaches `targets`
    /// exactly (the tails at call time when `None`).
    pub fn catch_up(
        &self,
        log: &dyn LogStore,
        targets: Option<&BTreeMap<u32, u64>>,
        max_batch: usize,
        hook: &dyn TransformHook,
        exec: Exec,
    ) -> Result<ScatterReport> {
        let targets = match targets {
            Some(t) => t.clone(),
            None => log
                .tails()?
                .into_iter()
                .enumerate()
                .map(|(p, o)| (p as u32, o.0))
                .collect(),
        };
        let mut total = ScatterReport::default();
        loop {
            let offs = self.offsets();
            if targets.iter().all(|(p, t)| offs.get(p).is_some_and(|o| o >= t)) {
                return Ok(total);
            }
            let r = self.scatter_bounded(log, max_batch, Some(&targets), hook, exec)?;
            total.add(r);
            if r.read == 0 {
                return Ok(total);
            }
        }
    }

    /// All slots sorted by id.
    pub fn entries(&self) -> Vec<(u64, ParameterSlot)> {
        let mut out = Vec::with_capacity(self.len());
        for s in self.stripes.iter() {
            out.extend(s.read().iter().map(|(&id, slot)| (id, (**slot).clone())));
        }
        out.sort_unstable_by_key(|e| e.0);
        out
    }

    /// Bit-level digest of the content, for cheap replica comparison.
    pub fn digest(&self) -> u64 {
        let mut buf = Vec::new();
        for (id, slot) in self.entries() {
            buf.extend_from_slice(&id.to_le_bytes());
            crate::plog::codec::encode_slot(&slot, &mut buf);
        }
        xxhash_rust::xxh3::xxh3_64(&buf)
    }
}
