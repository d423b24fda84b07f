//! Linearizable key-value registry with compare-and-swap, watches and leases.
//!
//! Values are JSON documents. Every committed change bumps a global
//! revision; CAS compares against the key's revision at its last write.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Clock;
use crate::error::{Error, Result};

pub type LeaseId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versioned {
    pub value: Value,
    pub rev: u64,
    pub lease: Option<LeaseId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WatchEvent {
    pub key: String,
    /// `None` for a deletion.
    pub value: Option<Value>,
    pub rev: u64,
}

struct Lease {
    ttl: Duration,
    expires: Duration,
}

#[derive(Default)]
struct State {
    rev: u64,
    data: BTreeMap<String, Versioned>,
    leases: HashMap<LeaseId, Lease>,
    next_lease: LeaseId,
    watchers: Vec<(String, Sender<WatchEvent>)>,
}

impl State {
    fn notify(&mut self, key: &str, value: Option<&Value>, rev: u64) {
        self.watchers.retain(|(prefix, tx)| {
            !key.starts_with(prefix.as_str())
                || tx
                    .send(WatchEvent {
                        key: key.to_string(),
                        value: value.cloned(),
                        rev,
                    })
                    .is_ok()
        });
    }

    fn write(&mut self, key: &str, value: Value, lease: Option<LeaseId>) -> u64 {
        self.rev += 1;
        let rev = self.rev;
        self.notify(key, Some(&value), rev);
        self.data.insert(key.to_string(), Versioned { value, rev, lease });
        rev
    }

    fn remove(&mut self, key: &str) -> bool {
        if self.data.remove(key).is_none() {
            return false;
        }
        self.rev += 1;
        let rev = self.rev;
        self.notify(key, None, rev);
        true
    }
}

pub struct Registry {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
}

impl Registry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Registry {
            state: Mutex::new(State::default()),
            clock,
        }
    }

    pub fn revision(&self) -> u64 {
        self.state.lock().rev
    }

    pub fn get(&self, key: &str) -> Option<Versioned> {
        self.state.lock().data.get(key).cloned()
    }

    pub fn get_as<T: DeserializeOwned>(&self, key: &str) -> Result<Option<(T, u64)>> {
        match self.get(key) {
            Some(v) => Ok(Some((serde_json::from_value(v.value)?, v.rev))),
            None => Ok(None),
        }
    }

    pub fn put(&self, key: &str, value: Value) -> u64 {
        self.state.lock().write(key, value, None)
    }

    /// Writes iff the key's revision equals `expected` (`None`: key absent).
    pub fn cas(&self, key: &str, expected: Option<u64>, value: Value) -> Result<u64> {
        self.cas_with_lease(key, expected, value, None)
    }

    pub fn cas_with_lease(&self, key: &str, expected: Option<u64>, value: Value, lease: Option<LeaseId>) -> Result<u64> {
        let mut s = self.state.lock();
        if let Some(id) = lease {
            if !s.leases.contains_key(&id) {
                return Err(Error::LeaseExpired(id));
            }
        }
        let current = s.data.get(key).map(|v| v.rev);
        if current != expected {
            return Err(Error::Conflict { key: key.to_string() });
        }
        Ok(s.write(key, value, lease))
    }

    pub fn delete(&self, key: &str) -> bool {
        self.state.lock().remove(key)
    }

    pub fn list(&self, prefix: &str) -> Vec<(String, Versioned)> {
        self.state
            .lock()
            .data
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Every later change under `prefix`, in commit order.
    pub fn watch(&self, prefix: &str) -> Receiver<WatchEvent> {
        let (tx, rx) = unbounded();
        self.state.lock().watchers.push((prefix.to_string(), tx));
        rx
    }

    /// Read-modify-write through CAS, retrying on conflict.
    pub fn update<T, R>(&self, key: &str, mut f: impl FnMut(&mut T) -> Result<R>) -> Result<R>
    where
        T: Serialize + DeserializeOwned,
    {
        loop {
            let Some((mut doc, rev)) = self.get_as::<T>(key)? else {
                return Err(Error::Config(format!("registry key {key} does not exist")));
            };
            let out = f(&mut doc)?;
            match self.cas(key, Some(rev), serde_json::to_value(&doc)?) {
                Ok(_) => return Ok(out),
                Err(Error::Conflict { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn grant(&self, ttl: Duration) -> LeaseId {
        let now = self.clock.now();
        let mut s = self.state.lock();
        s.next_lease += 1;
        let id = s.next_lease;
        s.leases.insert(id, Lease { ttl, expires: now + ttl });
        id
    }

    pub fn keepalive(&self, lease: LeaseId) -> Result<()> {
        let now = self.clock.now();
        let mut s = self.state.lock();
        match s.leases.get_mut(&lease) {
            Some(l) if l.expires > now => {
                l.expires = now + l.ttl;
                Ok(())
            }
            _ => Err(Error::LeaseExpired(lease)),
        }
    }

    pub fn revoke(&self, lease: LeaseId) {
        let mut s = self.state.lock();
        s.leases.remove(&lease);
        let keys: Vec<String> = s
            .data
            .iter()
            .filter(|(_, v)| v.lease == Some(lease))
            .map(|(k, _)| k.clone())
            .collect();
        for k in keys {
            s.remove(&k);
        }
    }

    /// Drops expired leases and their keys; returns the removed keys.
    pub fn sweep(&self) -> Vec<String> {
        let now = self.clock.now();
        let expired: Vec<LeaseId> = {
            let s = self.state.lock();
            s.leases.iter().filter(|(_, l)| l.expires <= now).map(|(id, _)| *id).collect()
        };
        let mut removed = Vec::new();
        for id in expired {
            let keys: Vec<String> = {
                let s = self.state.lock();
                s.data.iter().filter(|(_, v)| v.lease == Some(id)).map(|(k, _)| k.clone()).collect()
            };
            self.revoke(id);
            removed.extend(keys);
        }
        removed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use serde_json::json;

    fn reg() -> (Arc<LogicalClock>, Registry) {
        let c = Arc::new(LogicalClock::new());
        (c.clone(), Registry::new(c))
    }

    #[test]
    fn cas_semantics() {
        let (_, r) = reg();
        let r1 = r.cas("a", None, json!(1)).unwrap();
        assert!(matches!(r.cas("a", None, json!(2)), Err(Error::Conflict { .. })));
        let r2 = r.cas("a", Some(r1), json!(2)).unwrap();
        assert!(r2 > r1);
        assert!(r.cas("a", Some(r1), json!(3)).is_err());
        assert_eq!(r.get("a").unwrap().value, json!(2));
    }

    #[test]
    fn concurrent_updates_all_land() {
        let (_, r) = reg();
        r.put("n", json!(0));
        std::thread::scope(|s| {
            for _ in 0..2 {
                s.spawn(|| {
                    for _ in 0..500 {
                        r.update::<u64, _>("n", |v| {
                            *v += 1;
                            Ok(())
                        })
                        .unwrap();
                    }
                });
            }
        });
        assert_eq!(r.get_as::<u64>("n").unwrap().unwrap().0, 1000);
    }

    #[test]
    fn watch_sees_every_change() {
        let (_, r) = reg();
        let rx = r.watch("m/");
        r.put("m/x", json!(1));
        r.put("other", json!(1));
        r.delete("m/x");
        let evs: Vec<WatchEvent> = rx.try_iter().collect();
        assert_eq!(evs.len(), 2);
        assert_eq!(evs[1].value, None);
    }

    #[test]
    fn lease_expiry_removes_keys() {
        let (c, r) = reg();
        let l = r.grant(Duration::from_millis(100));
        r.cas_with_lease("m/member", None, json!("e"), Some(l)).unwrap();
        c.advance(Duration::from_millis(60));
        r.keepalive(l).unwrap();
        c.advance(Duration::from_millis(60));
        assert!(r.sweep().is_empty());
        c.advance(Duration::from_millis(60));
        assert_eq!(r.sweep(), vec!["m/member".to_string()]);
        assert!(r.get("m/member").is_none());
        assert!(matches!(r.keepalive(l), Err(Error::LeaseExpired(_))));
        let l2 = r.grant(Duration::from_millis(100));
        r.cas_with_lease("m/member", None, json!("e"), Some(l2)).unwrap();
    }

    #[test]
    fn list_by_prefix() {
        let (_, r) = reg();
        for k in ["a/1", "a/2", "b/1", "a0"] {
            r.put(k, json!(k));
        }
        let keys: Vec<String> = r.list("a/").into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, vec!["a/1", "a/2"]);
    }
}
