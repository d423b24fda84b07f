//! Workers that train through the cluster client and score each sample
//! before its update (progressive validation).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::client::ClusterClient;
use crate::clock::Clock;
use crate::error::Result;
use crate::master::owner;
use crate::model::{gradient_of_sample, predict, ModelSchema, ParameterSlot, Sample, View};
use crate::monitor::{Accumulator, MetricSample};
use crate::scheduler::{publish_metric, Registry};

/// Closes fixed-size metric windows across all trainers and publishes them.
pub struct MetricsSink {
    model_id: String,
    window_size: usize,
    registry: Arc<Registry>,
    clock: Arc<dyn Clock>,
    acc: Mutex<Accumulator>,
    history: Mutex<Vec<MetricSample>>,
}

impl MetricsSink {
    pub fn new(model_id: &str, window_size: usize, registry: Arc<Registry>, clock: Arc<dyn Clock>) -> Self {
        MetricsSink {
            model_id: model_id.into(),
            window_size,
            registry,
            clock,
            acc: Mutex::new(Accumulator::new()),
            history: Mutex::default(),
        }
    }

    /// Adds scored pairs; every full window is tagged with `version` and published.
    pub fn record(&self, pairs: &[(u8, f64)], version: u64) -> Result<()> {
        let mut acc = self.acc.lock();
        for &(label, p) in pairs {
            acc.add(label, p);
            if acc.count() >= self.window_size {
                let ts = self.clock.now().as_millis() as u64;
                let w = acc.close_window(self.window_size, version, ts).expect("window is full");
                publish_metric(&self.registry, &self.model_id, &w)?;
                self.history.lock().push(w);
            }
        }
        Ok(())
    }

    pub fn history(&self) -> Vec<MetricSample> {
        self.history.lock().clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchOutcome {
    pub samples: usize,
    pub features_pushed: usize,
    pub retries: u32,
}

/// Sums per-feature gradients of a batch.
pub fn aggregate_gradients(
    schema: &ModelSchema,
    slots: &crate::model::SlotMap,
    batch: &[(Sample, f64)],
) -> BTreeMap<u64, ParameterSlot> {
    let mut total: BTreeMap<u64, ParameterSlot> = BTreeMap::new();
    for (sample, p) in batch {
        for (id, g) in gradient_of_sample(schema, slots, sample, *p) {
            match total.get_mut(&id) {
                Some(acc) => {
                    for (name, vals) in g.iter() {
                        match acc.get_mut(name) {
                            Some(a) => a.iter_mut().zip(vals).for_each(|(a, v)| *a += v),
                            None => {
                                acc.insert(name, vals.to_vec());
                            }
                        }
                    }
                }
                None => {
                    total.insert(id, g);
                }
            }
        }
    }
    total
}

pub struct Trainer {
    client: ClusterClient,
    schema: Arc<ModelSchema>,
    sink: Arc<MetricsSink>,
    /// How long a batch keeps retrying while a master is down.
    pub retry_for: Duration,
    pub trained: Arc<AtomicU64>,
}

impl Trainer {
    pub fn new(client: ClusterClient, schema: Arc<ModelSchema>, sink: Arc<MetricsSink>) -> Self {
        Trainer {
            client,
            schema,
            sink,
            retry_for: Duration::from_secs(30),
            trained: Arc::default(),
        }
    }

    pub fn client(&self) -> &ClusterClient {
        &self.client
    }

    fn retrying<R>(&self, retries: &mut u32, wait: &dyn Fn(), mut f: impl FnMut() -> Result<R>) -> Result<R> {
        let deadline = Instant::now() + self.retry_for;
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(_) if Instant::now() < deadline => {
                    *retries += 1;
                    wait();
                    let _ = self.client.refresh();
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// pull → score (pre-update) → aggregate gradients → push.
    pub fn train_batch(&self, batch: &[(u64, Sample)]) -> Result<BatchOutcome> {
        self.train_batch_with(batch, &|| std::thread::sleep(Duration::from_millis(5)))
    }

    /// Like [`Trainer::train_batch`], calling `wait` between retries; a
    /// clock-driven cluster passes a closure that steps it forward.
    pub fn train_batch_with(&self, batch: &[(u64, Sample)], wait: &dyn Fn()) -> Result<BatchOutcome> {
        let mut out = BatchOutcome {
            samples: batch.len(),
            ..Default::default()
        };
        let mut ids: Vec<u64> = batch.iter().flat_map(|(_, s)| s.features.iter().map(|f| f.0)).collect();
        ids.sort_unstable();
        ids.dedup();
        let slots = self.retrying(&mut out.retries, wait, || self.client.pull(&ids))?;
        let mut scored = Vec::with_capacity(batch.len());
        let mut pairs = Vec::with_capacity(batch.len());
        for (_, s) in batch {
            let p = predict(&self.schema, &slots, s, View::Training)?;
            pairs.push((s.label, p));
            scored.push((s.clone(), p));
        }
        let version = self.client.map().latest_version().unwrap_or(0);
        self.sink.record(&pairs, version)?;
        let grads = aggregate_gradients(&self.schema, &slots, &scored);
        out.features_pushed = grads.len();
        // One request per shard, so a retry never re-applies another shard's part.
        let n = self.client.map().num_master_shards;
        let mut parts: BTreeMap<u32, Vec<(u64, ParameterSlot)>> = BTreeMap::new();
        for (id, g) in grads {
            parts.entry(owner(id, n)).or_default().push((id, g));
        }
        for part in parts.values() {
            self.retrying(&mut out.retries, wait, || self.client.push(part))?;
        }
        self.trained.fetch_add(batch.len() as u64, Ordering::Relaxed);
        Ok(out)
    }
}
