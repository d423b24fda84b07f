use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam::queue::ArrayQueue;
use crossbeam::utils::Backoff;
use serde::{Deserialize, Serialize};

use crate::plog::UpdateOp;

/// Default queue bound; producers back off beyond it.
pub const DEFAULT_COLLECTOR_CAPACITY: usize = 1 << 20;

/// Ids and op type only; values are read at gather time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirtyEntry {
    pub feature_id: u64,
    pub op: UpdateOp,
}

impl DirtyEntry {
    pub fn upsert(feature_id: u64) -> Self {
        DirtyEntry {
            feature_id,
            op: UpdateOp::Upsert,
        }
    }

    pub fn delete(feature_id: u64) -> Self {
        DirtyEntry {
            feature_id,
            op: UpdateOp::Delete,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectorStats {
    pub upserts_enqueued: u64,
    pub deletes_enqueued: u64,
    pub upserts_drained: u64,
    pub deletes_drained: u64,
    /// Times a producer found the queue full and had to wait.
    pub backpressure_waits: u64,
}

/// Lock-free multi-producer queue of dirty ids with a single drainer.
///
/// A full queue makes producers wait for the drainer; entries are never dropped.
pub struct Collector {
    queue: ArrayQueue<DirtyEntry>,
    upserts_in: AtomicU64,
    deletes_in: AtomicU64,
    upserts_out: AtomicU64,
    deletes_out: AtomicU64,
    waits: AtomicU64,
}

impl Collector {
    pub fn new(capacity: usize) -> Self {
        Collector {
            queue: ArrayQueue::new(capacity.max(1)),
            upserts_in: AtomicU64::new(0),
            deletes_in: AtomicU64::new(0),
            upserts_out: AtomicU64::new(0),
            deletes_out: AtomicU64::new(0),
            waits: AtomicU64::new(0),
        }
    }

    pub fn collect(&self, entry: DirtyEntry) {
        let mut entry = entry;
        let backoff = Backoff::new();
        let mut waited = false;
        loop {
            match self.queue.push(entry) {
                Ok(()) => break,
                Err(back) => {
                    entry = back;
                    if !waited {
                        self.waits.fetch_add(1, Ordering::Relaxed);
                        waited = true;
                    }
                    if backoff.is_completed() {
                        std::thread::yield_now();
                    } else {
                        backoff.snooze();
                    }
                }
            }
        }
        match entry.op {
            UpdateOp::Upsert => &self.upserts_in,
            UpdateOp::Delete => &self.deletes_in,
        }
        .fetch_add(1, Ordering::Relaxed);
    }

    /// Non-blocking enqueue; hands the entry back when the queue is full.
    pub fn try_collect(&self, entry: DirtyEntry) -> Result<(), DirtyEntry> {
        self.queue.push(entry)?;
        match entry.op {
            UpdateOp::Upsert => &self.upserts_in,
            UpdateOp::Delete => &self.deletes_in,
        }
        .fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Moves up to `max` queued entries into `out`, in arrival order.
    pub fn drain_into(&self, out: &mut Vec<DirtyEntry>, max: usize) -> usize {
        let mut ups = 0u64;
        let mut dels = 0u64;
        while ((ups + dels) as usize) < max {
            match self.queue.pop() {
                Some(e) => {
                    match e.op {
                        UpdateOp::Upsert => ups += 1,
                        UpdateOp::Delete => dels += 1,
                    }
                    out.push(e);
                }
                None => break,
            }
        }
        self.upserts_out.fetch_add(ups, Ordering::Relaxed);
        self.deletes_out.fetch_add(dels, Ordering::Relaxed);
        (ups + dels) as usize
    }

    pub fn drain(&self) -> Vec<DirtyEntry> {
        let mut out = Vec::with_capacity(self.queue.len());
        self.drain_into(&mut out, usize::MAX);
        out
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.queue.capacity()
    }

    pub fn stats(&self) -> CollectorStats {
        CollectorStats {
            upserts_enqueued: self.upserts_in.load(Ordering::Relaxed),
            deletes_enqueued: self.deletes_in.load(Ordering::Relaxed),
            upserts_drained: self.upserts_out.load(Ordering::Relaxed),
            deletes_drained: self.deletes_out.load(Ordering::Relaxed),
            backpressure_waits: self.waits.load(Ordering::Relaxed),
        }
    }
}

impl Default for Collector {
    fn default() -> Self {
        Collector::new(DEFAULT_COLLECTOR_CAPACITY)
    }
}
