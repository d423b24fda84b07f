use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::collector::DirtyEntry;
use super::table::FeatureTable;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::transform_for_serving;
use crate::plog::{UpdateOp, UpdateRecord};

/// When pending dirty ids are turned into records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GatherConfig {
    /// Every drain emits.
    Realtime,
    /// Emit once this many distinct ids are pending.
    Threshold { threshold_count: usize },
    /// Emit once per period.
    Period { period_ms: u64 },
}

impl Default for GatherConfig {
    fn default() -> Self {
        GatherConfig::Realtime
    }
}

impl GatherConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GatherConfig::Threshold { threshold_count: 0 } => {
                Err(Error::Config("gather threshold_count must be positive".into()))
            }
            GatherConfig::Period { period_ms: 0 } => {
                Err(Error::Config("gather period_ms must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            GatherConfig::Realtime => "realtime".into(),
            GatherConfig::Threshold { threshold_count } => format!("threshold({threshold_count})"),
            GatherConfig::Period { period_ms } => format!("period({period_ms}ms)"),
        }
    }
}

/// Deduplicating buffer between the collector and the pusher.
///
/// Keeps the last op per id; values are read from the table only when the
/// mode fires, so repeated updates to one id cost one record.
#[derive(Debug)]
pub struct Gatherer {
    cfg: GatherConfig,
    pending: IndexMap<u64, UpdateOp>,
    last_emit: Duration,
}

impl Gatherer {
    pub fn new(cfg: GatherConfig, now: Duration) -> Self {
        Gatherer {
            cfg,
            pending: IndexMap::new(),
            last_emit: now,
        }
    }

    pub fn config(&self) -> GatherConfig {
        self.cfg
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn absorb(&mut self, entries: &[DirtyEntry]) {
        for e in entries {
            self.pending.insert(e.feature_id, e.op);
        }
    }

    /// Takes pending ids when the mode fires (or `force`); `None` means not yet.
    pub fn take_ready(&mut self, now: Duration, force: bool) -> Option<Vec<(u64, UpdateOp)>> {
        let fire = force
            || match self.cfg {
                GatherConfig::Realtime => true,
                GatherConfig::Threshold { threshold_count } => self.pending.len() >= threshold_count,
                GatherConfig::Period { period_ms } => {
                    let due = now.saturating_sub(self.last_emit) >= Duration::from_millis(period_ms);
                    if due {
                        self.last_emit = now;
                    }
                    due
                }
            };
        if !fire || self.pending.is_empty() {
            return None;
        }
        if !matches!(self.cfg, GatherConfig::Period { .. }) {
            self.last_emit = now;
        }
        Some(std::mem::take(&mut self.pending).into_iter().collect())
    }

    /// Puts ids back after a failed push; newer pending ops win.
    pub fn restore(&mut self, ids: impl IntoIterator<Item = (u64, UpdateOp)>) {
        for (id, op) in ids {
            self.pending.entry(id).or_insert(op);
        }
    }

    /// One gather step: absorb `entries`, and if the mode fires, materialize
    /// full current values from `table`.
    pub fn gather(
        &mut self,
        entries: &[DirtyEntry],
        table: &FeatureTable,
        model_id: &Arc<str>,
        now: Duration,
        exec: Exec,
    ) -> Option<Vec<UpdateRecord>> {
        self.absorb(entries);
        let ids = self.take_ready(now, false)?;
        Some(materialize(&ids, table, model_id, exec))
    }
}

/// Builds full-value records from the table as it is now. An UPSERT for an
/// id that has since disappeared becomes a DELETE.
pub fn materialize(
    ids: &[(u64, UpdateOp)],
    table: &FeatureTable,
    model_id: &Arc<str>,
    exec: Exec,
) -> Vec<UpdateRecord> {
    let shard = table.shard_id();
    exec.map(ids, |&(id, op)| {
        let live = match op {
            UpdateOp::Upsert => table.get(id),
            UpdateOp::Delete => None,
        };
        match live {
            Some(entry) => {
                let payload = transform_for_serving(table.schema(), &entry.slot)
                    .expect("table slots conform to the schema");
                UpdateRecord::upsert(model_id.clone(), shard, id, payload, entry.epoch)
            }
            None => UpdateRecord::delete(model_id.clone(), shard, id, table.epoch()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, ModelSchema, ParameterSlot};

    fn setup() -> (FeatureTable, Arc<str>) {
        let schema = Arc::new(ModelSchema::lr_ftrl(HyperParams::default()).unwrap());
        let t = FeatureTable::new(0, 1, schema);
        for id in [5u64, 9] {
            t.put(
                id,
                ParameterSlot::new()
                    .with("z", vec![1.0])
                    .with("n", vec![1.0])
                    .with("w", vec![id as f64]),
            );
        }
        (t, Arc::from("m"))
    }

    #[test]
    fn last_op_wins() {
        let (t, m) = setup();
        let mut g = Gatherer::new(GatherConfig::Realtime, Duration::ZERO);
        let recs = g
            .gather(
                &[DirtyEntry::upsert(5), DirtyEntry::upsert(5), DirtyEntry::delete(9)],
                &t,
                &m,
                Duration::ZERO,
                Exec::Sequential,
            )
            .unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].op, UpdateOp::Upsert);
        assert_eq!(recs[0].payload, ParameterSlot::new().with("w", vec![5.0]));
        assert_eq!((recs[1].feature_id, recs[1].op), (9, UpdateOp::Delete));

        let recs = g
            .gather(&[DirtyEntry::upsert(5), DirtyEntry::delete(5)], &t, &m, Duration::ZERO, Exec::Sequential)
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].op, UpdateOp::Delete);
        assert!(recs[0].payload.is_empty());
    }

    #[test]
    fn values_read_at_emission() {
        let (t, m) = setup();
        let mut g = Gatherer::new(GatherConfig::Threshold { threshold_count: 2 }, Duration::ZERO);
        assert!(g.gather(&[DirtyEntry::upsert(5)], &t, &m, Duration::ZERO, Exec::Sequential).is_none());
        t.put(5, ParameterSlot::new().with("z", vec![0.0]).with("n", vec![0.0]).with("w", vec![42.0]));
        let recs = g.gather(&[DirtyEntry::upsert(9)], &t, &m, Duration::ZERO, Exec::Sequential).unwrap();
        assert_eq!(recs[0].payload.scalar("w"), Some(42.0));
    }

    #[test]
    fn threshold_boundary() {
        let schema = Arc::new(ModelSchema::lr_ftrl(HyperParams::default()).unwrap());
        let t = FeatureTable::new(0, 1, schema);
        let m: Arc<str> = Arc::from("m");
        let mut g = Gatherer::new(GatherConfig::Threshold { threshold_count: 100 }, Duration::ZERO);
        let first: Vec<_> = (0..99).map(DirtyEntry::upsert).collect();
        assert!(g.gather(&first, &t, &m, Duration::ZERO, Exec::Sequential).is_none());
        assert!(g.gather(&[DirtyEntry::upsert(3)], &t, &m, Duration::ZERO, Exec::Sequential).is_none());
        let recs = g.gather(&[DirtyEntry::upsert(99)], &t, &m, Duration::ZERO, Exec::Sequential).unwrap();
        assert_eq!(recs.len(), 100);
    }

    #[test]
    fn period_fires_on_clock() {
        let mut g = Gatherer::new(GatherConfig::Period { period_ms: 1000 }, Duration::ZERO);
        g.absorb(&[DirtyEntry::upsert(1)]);
        assert!(g.take_ready(Duration::from_millis(999), false).is_none());
        assert_eq!(g.take_ready(Duration::from_millis(1000), false).unwrap().len(), 1);
        g.absorb(&[DirtyEntry::upsert(2)]);
        assert!(g.take_ready(Duration::from_millis(1500), false).is_none());
        assert!(g.take_ready(Duration::from_millis(1500), true).is_some());
    }

    #[test]
    fn restore_keeps_newer_ops() {
        let mut g = Gatherer::new(GatherConfig::Realtime, Duration::ZERO);
        g.absorb(&[DirtyEntry::delete(1)]);
        g.restore([(1, UpdateOp::Upsert), (2, UpdateOp::Upsert)]);
        let ids = g.take_ready(Duration::ZERO, false).unwrap();
        assert_eq!(ids, vec![(1, UpdateOp::Delete), (2, UpdateOp::Upsert)]);
    }

    #[test]
    fn config_validation() {
        assert!(GatherConfig::Threshold { threshold_count: 0 }.validate().is_err());
        assert!(GatherConfig::Period { period_ms: 10 }.validate().is_ok());
        let parsed: GatherConfig = serde_json::from_str(r#"{"mode":"period","period_ms":10000}"#).unwrap();
        assert_eq!(parsed, GatherConfig::Period { period_ms: 10000 });
    }
}
