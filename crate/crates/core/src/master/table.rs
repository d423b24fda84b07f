use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use crate::model::{ModelSchema, ParameterSlot};

const STRIPES: usize = 64;

/// Owning shard of a feature id: `id mod n`.
pub fn owner(feature_id: u64, num_shards: u32) -> u32 {
    (feature_id % u64::from(num_shards)) as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub slot: ParameterSlot,
    /// Table epoch of the entry's last mutation.
    pub epoch: u64,
}

type Stripe = HashMap<u64, TableEntry>;

/// One master shard's parameters, lock-striped by feature id.
///
/// Each id lives in exactly one stripe, so holding its stripe lock makes a
/// multi-matrix update atomic for that id.
pub struct FeatureTable {
    shard_id: u32,
    num_shards: u32,
    schema: Arc<ModelSchema>,
    stripes: Box<[RwLock<Stripe>]>,
    epoch: AtomicU64,
}

/// Point-in-time copy of a table, sorted by feature id.
#[derive(Clone, Debug)]
pub struct TableSnapshot {
    pub shard_id: u32,
    pub num_shards: u32,
    pub epoch: u64,
    pub entries: Vec<(u64, TableEntry)>,
}

impl FeatureTable {
    pub fn new(shard_id: u32, num_shards: u32, schema: Arc<ModelSchema>) -> Self {
        assert!(num_shards >= 1 && shard_id < num_shards);
        FeatureTable {
            shard_id,
            num_shards,
            schema,
            stripes: (0..STRIPES).map(|_| RwLock::default()).collect(),
            epoch: AtomicU64::new(0),
        }
    }

    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn num_shards(&self) -> u32 {
        self.num_shards
    }

    pub fn schema(&self) -> &Arc<ModelSchema> {
        &self.schema
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.stripes.iter().map(|s| s.read().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stripe(&self, id: u64) -> &RwLock<Stripe> {
        // Ids are `shard + k * num_shards`; divide first so stripes stay balanced.
        let k = id / u64::from(self.num_shards);
        &self.stripes[(k % STRIPES as u64) as usize]
    }

    pub fn check_owned(&self, feature_id: u64) -> Result<()> {
        if owner(feature_id, self.num_shards) == self.shard_id {
            Ok(())
        } else {
            Err(Error::Routing {
                feature_id,
                shard_id: self.shard_id,
                num_shards: self.num_shards,
            })
        }
    }

    fn next_epoch(&self) -> u64 {
        self.epoch.fetch_add(1, Ordering::AcqRel) + 1
    }

    pub fn get(&self, id: u64) -> Option<TableEntry> {
        self.stripe(id).read().get(&id).cloned()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.stripe(id).read().contains_key(&id)
    }

    /// Applies `f` to the id's slot (starting from the schema's initial slot
    /// when absent) under the stripe lock. On error nothing changes.
    pub fn update<F>(&self, id: u64, f: F) -> Result<u64>
    where
        F: FnOnce(&mut ParameterSlot) -> Result<()>,
    {
        let mut stripe = self.stripe(id).write();
        match stripe.get_mut(&id) {
            Some(entry) => {
                f(&mut entry.slot)?;
                entry.epoch = self.next_epoch();
                Ok(entry.epoch)
            }
            None => {
                let mut slot = self.schema.initial_slot(id);
                f(&mut slot)?;
                let epoch = self.next_epoch();
                stripe.insert(id, TableEntry { slot, epoch });
                Ok(epoch)
            }
        }
    }

    /// Inserts or replaces a slot verbatim.
    pub fn put(&self, id: u64, slot: ParameterSlot) -> u64 {
        let epoch = self.next_epoch();
        self.stripe(id).write().insert(id, TableEntry { slot, epoch });
        epoch
    }

    pub fn remove(&self, id: u64) -> Option<TableEntry> {
        let mut stripe = self.stripe(id).write();
        let out = stripe.remove(&id);
        if out.is_some() {
            self.next_epoch();
        }
        out
    }

    /// Removes the id only if it was not touched since `epoch`.
    pub fn remove_if_epoch(&self, id: u64, epoch: u64) -> bool {
        let mut stripe = self.stripe(id).write();
        if stripe.get(&id).is_some_and(|e| e.epoch == epoch) {
            stripe.remove(&id);
            self.next_epoch();
            true
        } else {
            false
        }
    }

    /// `(epoch, id)` of every resident feature.
    pub fn epochs(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::with_capacity(self.len());
        for s in self.stripes.iter() {
            out.extend(s.read().iter().map(|(&id, e)| (e.epoch, id)));
        }
        out
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::with_capacity(self.len());
        for s in self.stripes.iter() {
            out.extend(s.read().keys().copied());
        }
        out.sort_unstable();
        out
    }

    /// Holds every stripe lock, so no update is in flight while `f` runs.
    pub fn with_frozen<R>(&self, f: impl FnOnce(&[RwLockReadGuard<'_, Stripe>], u64) -> R) -> R {
        let guards: Vec<_> = self.stripes.iter().map(|s| s.read()).collect();
        f(&guards, self.epoch())
    }

    /// Copy taken at one epoch boundary; `during` runs while updates are held.
    pub fn snapshot_with<R>(&self, during: impl FnOnce() -> R) -> (TableSnapshot, R) {
        let (mut entries, epoch, extra) = self.with_frozen(|guards, epoch| {
            let mut entries = Vec::with_capacity(guards.iter().map(|g| g.len()).sum());
            for g in guards {
                entries.extend(g.iter().map(|(&id, e)| (id, e.clone())));
            }
            (entries, epoch, during())
        });
        entries.sort_unstable_by_key(|(id, _)| *id);
        let snap = TableSnapshot {
            shard_id: self.shard_id,
            num_shards: self.num_shards,
            epoch,
            entries,
        };
        (snap, extra)
    }

    pub fn snapshot(&self) -> TableSnapshot {
        self.snapshot_with(|| ()).0
    }

    /// Replaces the whole content (recovery). Entries must be owned here.
    pub fn replace_all(&self, entries: Vec<(u64, TableEntry)>, epoch: u64) -> Result<()> {
        for (id, _) in &entries {
            self.check_owned(*id)?;
        }
        let mut guards: Vec<_> = self.stripes.iter().map(|s| s.write()).collect();
        for g in guards.iter_mut() {
            g.clear();
        }
        let mut max_epoch = epoch;
        for (id, e) in entries {
            max_epoch = max_epoch.max(e.epoch);
            let k = id / u64::from(self.num_shards);
            guards[(k % STRIPES as u64) as usize].insert(id, e);
        }
        self.epoch.store(max_epoch, Ordering::Release);
        Ok(())
    }

    pub fn from_snapshot(schema: Arc<ModelSchema>, snap: TableSnapshot) -> Result<Self> {
        let t = FeatureTable::new(snap.shard_id, snap.num_shards, schema);
        t.replace_all(snap.entries, snap.epoch)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyperParams;

    fn table() -> FeatureTable {
        FeatureTable::new(1, 4, Arc::new(ModelSchema::lr_ftrl(HyperParams::default()).unwrap()))
    }

    #[test]
    fn ownership() {
        let t = table();
        assert!(t.check_owned(5).is_ok());
        assert!(matches!(t.check_owned(6), Err(Error::Routing { feature_id: 6, .. })));
        assert_eq!(owner(7, 4), 3);
    }

    #[test]
    fn epochs_advance_on_every_mutation() {
        let t = table();
        assert_eq!(t.update(1, |s| { s.insert("w", vec![1.0]); Ok(()) }).unwrap(), 1);
        assert_eq!(t.update(5, |_| Ok(())).unwrap(), 2);
        assert!(t.update(5, |_| Err(Error::InvalidSlot("x".into()))).is_err());
        assert_eq!(t.epoch(), 2);
        assert!(t.remove(1).is_some());
        assert_eq!(t.epoch(), 3);
        assert!(t.remove(1).is_none());
        assert_eq!(t.epoch(), 3);
        assert!(!t.remove_if_epoch(5, 1));
        assert!(t.remove_if_epoch(5, 2));
    }

    #[test]
    fn failed_first_update_leaves_no_entry() {
        let t = table();
        assert!(t.update(9, |_| Err(Error::InvalidSlot("x".into()))).is_err());
        assert!(!t.contains(9));
    }

    #[test]
    fn snapshot_round_trip() {
        let t = table();
        for id in [1u64, 5, 9, 13] {
            t.put(id, ParameterSlot::new().with("w", vec![id as f64]));
        }
        let snap = t.snapshot();
        assert_eq!(snap.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 5, 9, 13]);
        let back = FeatureTable::from_snapshot(t.schema().clone(), snap.clone()).unwrap();
        assert_eq!(back.snapshot().entries, snap.entries);
        assert_eq!(back.epoch(), t.epoch());
    }
}
