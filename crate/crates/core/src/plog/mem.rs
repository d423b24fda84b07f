use std::sync::Arc;

use parking_lot::RwLock;

use super::codec::{decode_frame_where, encode_frame};
use super::{check_batch, check_partition, LogStore, Offset, PartitionId, UpdateRecord};
use crate::error::{Error, Result};

#[derive(Default)]
struct MemPartition {
    frames: Vec<Arc<[u8]>>,
    /// Offset of the first record of each frame.
    starts: Vec<u64>,
    tail: u64,
}

/// In-memory backend: encoded frames held in per-partition vectors.
pub struct MemLog {
    partitions: Vec<RwLock<MemPartition>>,
    compress: bool,
}

impl MemLog {
    pub fn new(num_partitions: u32) -> Self {
        Self::with_compression(num_partitions, true)
    }

    pub fn with_compression(num_partitions: u32, compress: bool) -> Self {
        assert!(num_partitions >= 1);
        MemLog {
            partitions: (0..num_partitions).map(|_| RwLock::default()).collect(),
            compress,
        }
    }

    fn part(&self, p: PartitionId) -> Result<&RwLock<MemPartition>> {
        check_partition(p, self.num_partitions())?;
        Ok(&self.partitions[p.0 as usize])
    }

    /// Total encoded bytes across partitions.
    pub fn stored_bytes(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| p.read().frames.iter().map(|f| f.len()).sum::<usize>())
            .sum()
    }
}

impl LogStore for MemLog {
    fn num_partitions(&self) -> u32 {
        self.partitions.len() as u32
    }

    fn append(&self, partition: PartitionId, batch: &[UpdateRecord]) -> Result<Offset> {
        let part = self.part(partition)?;
        check_batch(partition, batch)?;
        let frame: Arc<[u8]> = encode_frame(batch, self.compress).into();
        let mut g = part.write();
        let start = g.tail;
        g.frames.push(frame);
        g.starts.push(start);
        g.tail += batch.len() as u64;
        Ok(Offset(g.tail - 1))
    }

    fn read_from(
        &self,
        partition: PartitionId,
        start: Offset,
        max: usize,
    ) -> Result<Vec<(Offset, UpdateRecord)>> {
        let all = self.read_from_where(partition, start, max, &|_| true)?;
        Ok(all.into_iter().map(|(o, r)| (o, r.expect("kept"))).collect())
    }

    fn read_from_where(
        &self,
        partition: PartitionId,
        start: Offset,
        max: usize,
        keep: &dyn Fn(u64) -> bool,
    ) -> Result<Vec<(Offset, Option<UpdateRecord>)>> {
        let part = self.part(partition)?;
        let (frames, first_start) = {
            let g = part.read();
            if start.0 > g.tail {
                return Err(Error::OffsetOutOfRange {
                    partition: partition.0,
                    start: start.0,
                    tail: g.tail,
                });
            }
            if start.0 == g.tail || max == 0 {
                return Ok(Vec::new());
            }
            let idx = g.starts.partition_point(|&s| s <= start.0) - 1;
            let end = start.0.saturating_add(max as u64);
            let last = g.starts.partition_point(|&s| s < end);
            (g.frames[idx..last].to_vec(), g.starts[idx])
        };
        let mut out = Vec::with_capacity(max.min(4096));
        let mut offset = first_start;
        'frames: for frame in frames {
            for rec in decode_frame_where(&frame, keep).map_err(|e| Error::CorruptFrame {
                partition: partition.0,
                reason: e.to_string(),
            })? {
                if offset >= start.0 {
                    if out.len() == max {
                        break 'frames;
                    }
                    out.push((Offset(offset), rec));
                }
                offset += 1;
            }
        }
        Ok(out)
    }

    fn tail(&self, partition: PartitionId) -> Result<Offset> {
        Ok(Offset(self.part(partition)?.read().tail))
    }
}
