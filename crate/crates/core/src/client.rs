//! Shard-aware client used by trainers and predictors.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::master::{owner, PushAck};
use crate::model::{ParameterSlot, SlotMap};
use crate::scheduler::{shardmap_key, Registry, ShardMap};
use crate::wire::{Client, Directory};

/// Where routing metadata comes from.
pub trait MapSource: Send + Sync {
    fn shard_map(&self, model_id: &str) -> Result<ShardMap>;
}

impl MapSource for Registry {
    fn shard_map(&self, model_id: &str) -> Result<ShardMap> {
        self.get_as::<ShardMap>(&shardmap_key(model_id))?
            .map(|(m, _)| m)
            .ok_or_else(|| Error::Config(format!("unknown model {model_id}")))
    }
}

/// Reads the map from a scheduler over the wire (`STATUS`).
pub struct SchedulerMaps(pub Arc<dyn Client>);

impl MapSource for SchedulerMaps {
    fn shard_map(&self, model_id: &str) -> Result<ShardMap> {
        self.0.status(model_id)
    }
}

fn group_by_shard<T: Clone>(items: &[T], id: impl Fn(&T) -> u64, n: u32) -> BTreeMap<u32, Vec<T>> {
    let mut out: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for it in items {
        out.entry(owner(id(it), n)).or_default().push(it.clone());
    }
    out
}

pub struct ClusterClient {
    model_id: String,
    source: Arc<dyn MapSource>,
    dir: Arc<Directory>,
    map: RwLock<Arc<ShardMap>>,
    fetched: Mutex<Instant>,
    max_age: Duration,
    next_key: AtomicU64,
    /// Extra attempts on another replica after an unavailable one.
    pub retries: u32,
}

impl ClusterClient {
    pub fn new(model_id: &str, source: Arc<dyn MapSource>, dir: Arc<Directory>) -> Result<Self> {
        let map = source.shard_map(model_id)?;
        Ok(ClusterClient {
            model_id: model_id.into(),
            source,
            dir,
            map: RwLock::new(Arc::new(map)),
            fetched: Mutex::new(Instant::now()),
            max_age: Duration::from_millis(100),
            next_key: AtomicU64::new(0),
            retries: 1,
        })
    }

    pub fn with_max_age(mut self, max_age: Duration) -> Self {
        self.max_age = max_age;
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn refresh(&self) -> Result<Arc<ShardMap>> {
        let m = Arc::new(self.source.shard_map(&self.model_id)?);
        *self.map.write() = m.clone();
        *self.fetched.lock() = Instant::now();
        Ok(m)
    }

    pub fn map(&self) -> Arc<ShardMap> {
        if self.fetched.lock().elapsed() >= self.max_age {
            if let Ok(m) = self.refresh() {
                return m;
            }
        }
        self.map.read().clone()
    }

    pub fn push(&self, updates: &[(u64, ParameterSlot)]) -> Result<PushAck> {
        let map = self.map();
        let mut total = PushAck::default();
        for (shard, part) in group_by_shard(updates, |u| u.0, map.num_master_shards) {
            let ack = self.with_master(shard, |c| c.push_grad(&self.model_id, part.clone()))?;
            total.applied += ack.applied;
            total.rejected.extend(ack.rejected);
            total.epoch = total.epoch.max(ack.epoch);
        }
        Ok(total)
    }

    /// Training-view parameters for `ids`.
    pub fn pull(&self, ids: &[u64]) -> Result<SlotMap> {
        let map = self.map();
        let mut out = SlotMap::with_capacity(ids.len());
        for (shard, part) in group_by_shard(ids, |i| *i, map.num_master_shards) {
            let got = self.with_master(shard, |c| c.pull_params(&self.model_id, part.clone()))?;
            out.extend(got);
        }
        Ok(out)
    }

    fn with_master<R>(&self, shard: u32, f: impl Fn(&dyn Client) -> Result<R>) -> Result<R> {
        let mut map = self.map();
        for attempt in 0..=self.retries {
            let r = map
                .master_endpoint(shard)
                .and_then(|ep| self.dir.client(ep))
                .and_then(|c| f(&*c));
            match r {
                Err(e) if (e.is_unavailable() || matches!(e, Error::ShardDown { .. })) && attempt < self.retries => {
                    map = self.refresh().unwrap_or(map);
                }
                other => return other,
            }
        }
        unreachable!("loop returns on the last attempt")
    }

    /// Serving parameters, spread round-robin over healthy replicas. An
    /// unavailable replica is retried on the next one.
    pub fn pull_serving(&self, ids: &[u64]) -> Result<Vec<(u64, ParameterSlot)>> {
        let mut map = self.map();
        let mut out = Vec::with_capacity(ids.len());
        for (shard, part) in group_by_shard(ids, |i| *i, map.num_slave_shards) {
            let mut attempt = 0;
            loop {
                let key = self.next_key.fetch_add(1, Ordering::Relaxed);
                let r = map
                    .slaves
                    .get(shard as usize)
                    .ok_or(Error::ShardDown { shard_id: shard })
                    .and_then(|g| g.route(key).map(|r| r.endpoint.clone()))
                    .and_then(|ep| self.dir.client(&ep))
                    .and_then(|c| c.pull_serving(&self.model_id, part.clone()));
                match r {
                    Ok(got) => {
                        out.extend(got);
                        break;
                    }
                    Err(e) if e.is_unavailable() && attempt < self.retries => {
                        attempt += 1;
                        if let Ok(m) = self.refresh() {
                            map = m;
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(out)
    }
}
