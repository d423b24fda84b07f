use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};

use super::codec::{decode_frame_where, encode_frame, peek_header, FrameHeader};
use super::{check_batch, check_partition, LogStore, Offset, PartitionId, UpdateRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct FrameEntry {
    start: u64,
    pos: u64,
    len: usize,
    count: u32,
}

#[derive(Default)]
struct FrameIndex {
    frames: Vec<FrameEntry>,
    tail: u64,
    /// File position just past the last complete frame.
    scanned: u64,
}

struct FilePartition {
    id: u32,
    path: PathBuf,
    writer: Mutex<File>,
    reader: File,
    index: RwLock<FrameIndex>,
}

/// One append-only file per partition at `<log_dir>/<model_id>/partition-<k>.log`.
///
/// Several processes may share the directory: appends hold an exclusive file
/// lock and readers pick up frames written by others on their next call.
pub struct FileLog {
    dir: PathBuf,
    partitions: Vec<FilePartition>,
    compress: bool,
    fsync: bool,
}

impl FileLog {
    pub fn open(log_dir: impl AsRef<Path>, model_id: &str, num_partitions: u32) -> Result<Self> {
        Self::open_with(log_dir, model_id, num_partitions, true, true)
    }

    pub fn open_with(
        log_dir: impl AsRef<Path>,
        model_id: &str,
        num_partitions: u32,
        compress: bool,
        fsync: bool,
    ) -> Result<Self> {
        assert!(num_partitions >= 1);
        let dir = log_dir.as_ref().join(model_id);
        fs::create_dir_all(&dir)?;
        let mut partitions = Vec::with_capacity(num_partitions as usize);
        for k in 0..num_partitions {
            let path = Self::partition_path(&dir, k);
            let writer = OpenOptions::new().create(true).append(true).open(&path)?;
            let reader = File::open(&path)?;
            let part = FilePartition {
                id: k,
                path,
                writer: Mutex::new(writer),
                reader,
                index: RwLock::default(),
            };
            part.refresh()?;
            part.repair_torn_tail()?;
            partitions.push(part);
        }
        Ok(FileLog {
            dir,
            partitions,
            compress,
            fsync,
        })
    }

    pub fn partition_path(model_dir: &Path, k: u32) -> PathBuf {
        model_dir.join(format!("partition-{k}.log"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn part(&self, p: PartitionId) -> Result<&FilePartition> {
        check_partition(p, self.num_partitions())?;
        Ok(&self.partitions[p.0 as usize])
    }
}

impl FilePartition {
    /// Indexes complete frames appended since the last scan (possibly by
    /// another process). Stops quietly at a partial frame.
    fn refresh(&self) -> Result<()> {
        let len = self.reader.metadata()?.len();
        if len <= self.index.read().scanned {
            return Ok(());
        }
        let mut idx = self.index.write();
        let mut pos = idx.scanned;
        while pos < len {
            let mut head = [0u8; 17];
            let avail = (len - pos).min(head.len() as u64) as usize;
            self.reader.read_exact_at(&mut head[..avail], pos)?;
            let h: FrameHeader = match peek_header(&head[..avail]) {
                Ok(Some(h)) => h,
                Ok(None) => break,
                Err(e) => {
                    return Err(Error::CorruptFrame {
                        partition: self.id,
                        reason: format!("at byte {pos}: {e}"),
                    })
                }
            };
            if pos + h.total_len as u64 > len {
                break;
            }
            let mut frame = vec![0u8; h.total_len];
            self.reader.read_exact_at(&mut frame, pos)?;
            if crc32fast::hash(&frame[17..]) != h.crc {
                // Either a write still in flight or a torn tail.
                break;
            }
            let start = idx.tail;
            idx.frames.push(FrameEntry {
                start,
                pos,
                len: h.total_len,
                count: h.record_count,
            });
            idx.tail += u64::from(h.record_count);
            pos += h.total_len as u64;
        }
        idx.scanned = pos;
        Ok(())
    }

    /// Truncates bytes after the last complete frame left by a crashed writer.
    fn repair_torn_tail(&self) -> Result<()> {
        let w = self.writer.lock();
        w.lock()?;
        let res = (|| {
            self.refresh()?;
            let scanned = self.index.read().scanned;
            if w.metadata()?.len() > scanned {
                w.set_len(scanned)?;
            }
            Ok(())
        })();
        w.unlock()?;
        res
    }
}

impl LogStore for FileLog {
    fn num_partitions(&self) -> u32 {
        self.partitions.len() as u32
    }

    fn append(&self, partition: PartitionId, batch: &[UpdateRecord]) -> Result<Offset> {
        let part = self.part(partition)?;
        check_batch(partition, batch)?;
        let frame = encode_frame(batch, self.compress);
        let fail = |e: std::io::Error| Error::AppendFailed {
            partition: partition.0,
            reason: e.to_string(),
        };
        let mut w = part.writer.lock();
        w.lock().map_err(fail)?;
        let res = (|| {
            part.refresh()?;
            let scanned = part.index.read().scanned;
            if w.metadata().map_err(fail)?.len() != scanned {
                // Torn bytes from a crashed writer would shift every later frame.
                w.set_len(scanned).map_err(fail)?;
            }
            w.write_all(&frame).map_err(fail)?;
            if self.fsync {
                w.sync_data().map_err(fail)?;
            }
            let mut idx = part.index.write();
            let start = idx.tail;
            let pos = idx.scanned;
            idx.frames.push(FrameEntry {
                start,
                pos,
                len: frame.len(),
                count: batch.len() as u32,
            });
            idx.tail += batch.len() as u64;
            idx.scanned += frame.len() as u64;
            Ok(Offset(idx.tail - 1))
        })();
        w.unlock().map_err(fail)?;
        res
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
        part.refresh()?;
        let entries: Vec<FrameEntry> = {
            let idx = part.index.read();
            if start.0 > idx.tail {
                return Err(Error::OffsetOutOfRange {
                    partition: partition.0,
                    start: start.0,
                    tail: idx.tail,
                });
            }
            if start.0 == idx.tail || max == 0 {
                return Ok(Vec::new());
            }
            let first = idx.frames.partition_point(|f| f.start <= start.0) - 1;
            let end = start.0.saturating_add(max as u64);
            let last = idx.frames.partition_point(|f| f.start < end);
            idx.frames[first..last].to_vec()
        };
        let mut out = Vec::with_capacity(max.min(4096));
        'frames: for e in entries {
            let mut buf = vec![0u8; e.len];
            part.reader.read_exact_at(&mut buf, e.pos)?;
            let records = decode_frame_where(&buf, keep).map_err(|err| Error::CorruptFrame {
                partition: partition.0,
                reason: format!("{}: {err}", part.path.display()),
            })?;
            debug_assert_eq!(records.len(), e.count as usize);
            for (i, rec) in records.into_iter().enumerate() {
                let off = e.start + i as u64;
                if off >= start.0 {
                    if out.len() == max {
                        break 'frames;
                    }
                    out.push((Offset(off), rec));
                }
            }
        }
        Ok(out)
    }

    fn tail(&self, partition: PartitionId) -> Result<Offset> {
        let part = self.part(partition)?;
        part.refresh()?;
        Ok(Offset(part.index.read().tail))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plog::testing::{conformance, rec};

    #[test]
    fn conforms() {
        let dir = tempfile::tempdir().unwrap();
        conformance(&FileLog::open(dir.path(), "m", 4).unwrap());
        assert!(dir.path().join("m/partition-3.log").exists());
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let before = {
            let log = FileLog::open(dir.path(), "m", 2).unwrap();
            log.append(PartitionId(0), &[rec(1, 0.5), rec(2, 1.5)]).unwrap();
            log.append(PartitionId(0), &[rec(3, 2.5)]).unwrap();
            log.read_from(PartitionId(0), Offset(0), 10).unwrap()
        };
        let log = FileLog::open(dir.path(), "m", 2).unwrap();
        assert_eq!(log.tail(PartitionId(0)).unwrap(), Offset(3));
        assert_eq!(log.read_from(PartitionId(0), Offset(0), 10).unwrap(), before);
        assert_eq!(log.append(PartitionId(0), &[rec(4, 0.0)]).unwrap(), Offset(3));
    }

    #[test]
    fn second_handle_sees_appends() {
        let dir = tempfile::tempdir().unwrap();
        let a = FileLog::open(dir.path(), "m", 1).unwrap();
        let b = FileLog::open(dir.path(), "m", 1).unwrap();
        a.append(PartitionId(0), &[rec(1, 1.0)]).unwrap();
        assert_eq!(b.append(PartitionId(0), &[rec(2, 2.0)]).unwrap(), Offset(1));
        assert_eq!(a.read_from(PartitionId(0), Offset(0), 5).unwrap().len(), 2);
    }

    #[test]
    fn torn_tail_is_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        {
            let log = FileLog::open(dir.path(), "m", 1).unwrap();
            log.append(PartitionId(0), &[rec(1, 1.0)]).unwrap();
        }
        let path = dir.path().join("m/partition-0.log");
        let good = fs::metadata(&path).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[9, 0, 0, 0, 0, 1]).unwrap();
        drop(f);
        let log = FileLog::open(dir.path(), "m", 1).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), good);
        assert_eq!(log.append(PartitionId(0), &[rec(2, 2.0)]).unwrap(), Offset(1));
    }
}
