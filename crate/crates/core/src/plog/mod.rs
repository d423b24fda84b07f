//! Partitioned, offset-addressed, append-only log between masters and slaves.
//!
//! Each partition is totally ordered and offsets grow by one per record,
//! starting at zero. Appends take a whole batch and store it as one framed,
//! optionally compressed block. Records carry full values, so consumers can
//! replay from any offset and re-applying a record is harmless.

pub mod codec;
mod fault;
mod file;
mod mem;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fault::{FailMode, FaultyLog};
pub use file::FileLog;
pub use mem::MemLog;

use crate::error::Result;
use crate::model::ParameterSlot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionId(pub u32);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Offset(pub u64);

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOp {
    Upsert,
    Delete,
}

/// Full-value synchronization message for one feature id.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub feature_id: u64,
    pub op: UpdateOp,
    pub model_id: Arc<str>,
    pub source_shard: u32,
    /// Complete serving-view slot for UPSERT, empty for DELETE.
    pub payload: ParameterSlot,
    pub epoch: u64,
}

impl UpdateRecord {
    pub fn upsert(
        model_id: Arc<str>,
        source_shard: u32,
        feature_id: u64,
        payload: ParameterSlot,
        epoch: u64,
    ) -> Self {
        UpdateRecord {
            feature_id,
            op: UpdateOp::Upsert,
            model_id,
            source_shard,
            payload,
            epoch,
        }
    }

    pub fn delete(model_id: Arc<str>, source_shard: u32, feature_id: u64, epoch: u64) -> Self {
        UpdateRecord {
            feature_id,
            op: UpdateOp::Delete,
            model_id,
            source_shard,
            payload: ParameterSlot::new(),
            epoch,
        }
    }

    pub fn encoded(&self) -> Vec<u8> {
        let mut out = Vec::new();
        codec::encode_record(self, &mut out);
        out
    }
}

/// Storage backend shared by the in-memory and file-backed logs.
pub trait LogStore: Send + Sync {
    fn num_partitions(&self) -> u32;

    /// Appends `batch` as one frame; returns the offset of its last record.
    fn append(&self, partition: PartitionId, batch: &[UpdateRecord]) -> Result<Offset>;

    /// Records with offsets in `[start, min(tail - 1, start + max - 1)]`.
    fn read_from(
        &self,
        partition: PartitionId,
        start: Offset,
        max: usize,
    ) -> Result<Vec<(Offset, UpdateRecord)>>;

    /// Offset the next append will receive (= number of records).
    fn tail(&self, partition: PartitionId) -> Result<Offset>;

    /// Like [`LogStore::read_from`], but records whose feature id fails
    /// `keep` come back as `None`; backends may skip decoding them.
    fn read_from_where(
        &self,
        partition: PartitionId,
        start: Offset,
        max: usize,
        keep: &dyn Fn(u64) -> bool,
    ) -> Result<Vec<(Offset, Option<UpdateRecord>)>> {
        Ok(self
            .read_from(partition, start, max)?
            .into_iter()
            .map(|(o, r)| (o, keep(r.feature_id).then_some(r)))
            .collect())
    }

    fn partitions(&self) -> Vec<PartitionId> {
        (0..self.num_partitions()).map(PartitionId).collect()
    }

    /// Tails of every partition, captured one after another.
    fn tails(&self) -> Result<Vec<Offset>> {
        self.partitions().into_iter().map(|p| self.tail(p)).collect()
    }
}

pub type SharedLog = Arc<dyn LogStore>;

/// Partition a master shard publishes to.
pub fn partition_for_shard(source_shard: u32, num_partitions: u32) -> PartitionId {
    assert!(num_partitions >= 1, "log needs at least one partition");
    PartitionId(source_shard % num_partitions)
}

pub(crate) fn check_partition(p: PartitionId, n: u32) -> Result<()> {
    if p.0 >= n {
        Err(crate::Error::NoSuchPartition {
            partition: p.0,
            num_partitions: n,
        })
    } else {
        Ok(())
    }
}

pub(crate) fn check_batch(p: PartitionId, batch: &[UpdateRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(crate::Error::AppendFailed {
            partition: p.0,
            reason: "empty batch".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub fn rec(id: u64, w: f64) -> UpdateRecord {
        UpdateRecord::upsert(
            Arc::from("m"),
            0,
            id,
            ParameterSlot::new().with("w", vec![w]),
            id,
        )
    }

    /// Shared conformance checks run against every backend.
    pub fn conformance(log: &dyn LogStore) {
        let p = PartitionId(1);
        assert_eq!(log.tail(p).unwrap(), Offset(0));
        assert_eq!(log.append(p, &[rec(1, 1.0), rec(2, 2.0), rec(3, 3.0)]).unwrap(), Offset(2));
        assert_eq!(log.tail(p).unwrap(), Offset(3));
        assert_eq!(log.append(p, &[rec(4, 4.0)]).unwrap(), Offset(3));
        assert_eq!(log.append(p, &[rec(5, 5.0)]).unwrap(), Offset(4));
        assert_eq!(log.tail(p).unwrap(), Offset(5));
        assert_eq!(log.tail(PartitionId(0)).unwrap(), Offset(0));

        let all = log.read_from(p, Offset(0), 10).unwrap();
        assert_eq!(
            all.iter().map(|(o, _)| o.0).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(all[3].1.feature_id, 4);

        let mid = log.read_from(p, Offset(1), 2).unwrap();
        assert_eq!(
            mid.iter().map(|(o, r)| (o.0, r.feature_id)).collect::<Vec<_>>(),
            vec![(1, 2), (2, 3)]
        );
        assert!(log.read_from(p, Offset(5), 10).unwrap().is_empty());
        assert!(matches!(
            log.read_from(p, Offset(6), 10),
            Err(crate::Error::OffsetOutOfRange { .. })
        ));

        let again = log.read_from(p, Offset(2), 10).unwrap();
        let bytes = |v: &[(Offset, UpdateRecord)]| {
            v.iter().map(|(o, r)| (o.0, r.encoded())).collect::<Vec<_>>()
        };
        assert_eq!(bytes(&again), bytes(&log.read_from(p, Offset(2), 10).unwrap()));

        let n = log.num_partitions();
        assert!(log.append(PartitionId(n), &[rec(9, 9.0)]).is_err());
        assert!(log.append(p, &[]).is_err());
    }
}
