use std::collections::{HashMap, HashSet};

use parking_lot::Mutex;

use super::{LogStore, Offset, PartitionId, SharedLog, UpdateRecord};
use crate::error::{Error, Result};

/// When an injected append failure is reported relative to the write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailMode {
    /// Nothing is written.
    BeforeWrite,
    /// The batch is written but the caller sees an error, so a retry duplicates it.
    AfterWrite,
}

#[derive(Default)]
struct Faults {
    stalled: bool,
    stalled_partitions: HashSet<u32>,
    pending: HashMap<u32, Vec<FailMode>>,
}

/// Wrapper that injects append failures and whole-log stalls. Reads pass through.
pub struct FaultyLog {
    inner: SharedLog,
    faults: Mutex<Faults>,
}

impl FaultyLog {
    pub fn new(inner: SharedLog) -> Self {
        FaultyLog {
            inner,
            faults: Mutex::default(),
        }
    }

    pub fn inner(&self) -> &SharedLog {
        &self.inner
    }

    /// Every append fails until [`FaultyLog::unstall`].
    pub fn stall(&self) {
        self.faults.lock().stalled = true;
    }

    /// Clears the whole-log stall and every partition stall.
    pub fn unstall(&self) {
        let mut f = self.faults.lock();
        f.stalled = false;
        f.stalled_partitions.clear();
    }

    /// Appends to `partition` fail until it is unstalled.
    pub fn stall_partition(&self, partition: PartitionId) {
        self.faults.lock().stalled_partitions.insert(partition.0);
    }

    pub fn unstall_partition(&self, partition: PartitionId) {
        self.faults.lock().stalled_partitions.remove(&partition.0);
    }

    pub fn is_stalled(&self) -> bool {
        self.faults.lock().stalled
    }

    /// Queues `n` failures for the next appends to `partition`.
    pub fn fail_next(&self, partition: PartitionId, n: usize, mode: FailMode) {
        self.faults
            .lock()
            .pending
            .entry(partition.0)
            .or_default()
            .extend(std::iter::repeat_n(mode, n));
    }
}

impl LogStore for FaultyLog {
    fn num_partitions(&self) -> u32 {
        self.inner.num_partitions()
    }

    fn append(&self, partition: PartitionId, batch: &[UpdateRecord]) -> Result<Offset> {
        let injected = {
            let mut f = self.faults.lock();
            if f.stalled || f.stalled_partitions.contains(&partition.0) {
                return Err(Error::AppendFailed {
                    partition: partition.0,
                    reason: "log stalled".into(),
                });
            }
            f.pending.get_mut(&partition.0).and_then(|q| (!q.is_empty()).then(|| q.remove(0)))
        };
        let fail = || Error::AppendFailed {
            partition: partition.0,
            reason: "injected failure".into(),
        };
        match injected {
            Some(FailMode::BeforeWrite) => Err(fail()),
            Some(FailMode::AfterWrite) => {
                self.inner.append(partition, batch)?;
                Err(fail())
            }
            None => self.inner.append(partition, batch),
        }
    }

    fn read_from(
        &self,
        partition: PartitionId,
        start: Offset,
        max: usize,
    ) -> Result<Vec<(Offset, UpdateRecord)>> {
        self.inner.read_from(partition, start, max)
    }

    fn read_from_where(
        &self,
        partition: PartitionId,
        start: Offset,
        max: usize,
        keep: &dyn Fn(u64) -> bool,
    ) -> Result<Vec<(Offset, Option<UpdateRecord>)>> {
        self.inner.read_from_where(partition, start, max, keep)
    }

    fn tail(&self, partition: PartitionId) -> Result<Offset> {
        self.inner.tail(partition)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::plog::testing::rec;
    use crate::plog::MemLog;

    #[test]
    fn injected_failures() {
        let log = FaultyLog::new(Arc::new(MemLog::new(2)));
        let p = PartitionId(0);
        log.fail_next(p, 1, FailMode::BeforeWrite);
        log.fail_next(p, 1, FailMode::AfterWrite);
        assert!(log.append(p, &[rec(1, 1.0)]).is_err());
        assert_eq!(log.tail(p).unwrap(), Offset(0));
        assert!(log.append(p, &[rec(1, 1.0)]).is_err());
        assert_eq!(log.tail(p).unwrap(), Offset(1));
        assert_eq!(log.append(p, &[rec(1, 1.0)]).unwrap(), Offset(1));

        log.stall();
        assert!(log.append(PartitionId(1), &[rec(2, 1.0)]).is_err());
        log.unstall();
        assert!(log.append(PartitionId(1), &[rec(2, 1.0)]).is_ok());

        log.stall_partition(PartitionId(1));
        assert!(log.append(PartitionId(1), &[rec(2, 1.0)]).is_err());
        assert!(log.append(p, &[rec(1, 1.0)]).is_ok());
        log.unstall_partition(PartitionId(1));
        assert!(log.append(PartitionId(1), &[rec(2, 1.0)]).is_ok());
    }
}
