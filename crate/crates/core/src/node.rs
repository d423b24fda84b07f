//! Wire-facing wrappers around shards, and the background loops that keep
//! them syncing.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::master::{CheckpointStores, MasterShard};
use crate::slave::SlaveReplica;
use crate::wire::{NodeHealth, Request, Response, Service};

fn unsupported(role: &str, req: &Request) -> Response {
    Response::Error {
        kind: "wire".into(),
        message: format!("{role} does not handle {}", req.name()),
    }
}

pub struct MasterNode {
    pub master: Arc<MasterShard>,
    pub stores: CheckpointStores,
}

impl Service for MasterNode {
    fn handle(&self, req: Request) -> Response {
        let m = &self.master;
        match req {
            Request::PushGrad { model_id, updates } => {
                Response::from_result(m.push_gradients(&model_id, &updates), |ack| Response::PushAck { ack })
            }
            Request::PullParams { model_id, ids } => {
                Response::from_result(m.pull_parameters(&model_id, &ids), |params| Response::Params { params })
            }
            Request::SaveCkpt { model_id, version, dest } => {
                let r = check_model(m.model_id(), &model_id)
                    .and_then(|_| m.save_checkpoint(self.stores.get(dest).clone(), version));
                Response::from_result(r, |meta| Response::CkptSaved { meta })
            }
            Request::LoadCkpt { model_id, version, dest } => {
                let r = check_model(m.model_id(), &model_id).and_then(|_| m.recover(self.stores.get(dest), version));
                Response::from_result(r, |report| Response::CkptLoaded { report })
            }
            Request::Health => Response::Health {
                health: NodeHealth::Master(m.health()),
            },
            other => unsupported("master", &other),
        }
    }
}

pub struct SlaveNode {
    pub replica: Arc<SlaveReplica>,
    pub stores: CheckpointStores,
}

impl SlaveNode {
    pub fn load(&self, version: Option<u64>) -> Result<u64> {
        let r = &self.replica;
        match version {
            Some(v) => {
                let dest = self.stores.locate(r.model_id(), v).ok_or_else(|| Error::IncompleteCheckpoint {
                    version: v,
                    reason: "no tier holds a complete set".into(),
                })?;
                r.load_version(self.stores.get(dest), v)
            }
            None => {
                r.reset();
                r.catch_up()?;
                Ok(0)
            }
        }
    }
}

impl Service for SlaveNode {
    fn handle(&self, req: Request) -> Response {
        let r = &self.replica;
        match req {
            Request::PullServing { model_id, ids } => {
                Response::from_result(r.pull_serving(&model_id, &ids), |params| Response::Params { params })
            }
            Request::LoadVersion { model_id, version } => {
                let res = check_model(r.model_id(), &model_id).and_then(|_| self.load(version));
                Response::from_result(res, |version| Response::VersionLoaded { version })
            }
            Request::Health => Response::Health {
                health: NodeHealth::Slave(r.health()),
            },
            other => unsupported("slave", &other),
        }
    }
}

fn check_model(expected: &str, got: &str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ModelMismatch {
            expected: expected.into(),
            got: got.into(),
        })
    }
}

/// A background loop stopped on drop.
pub struct Worker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    /// Runs `step` until stopped; sleeps `idle` whenever it returns `false`.
    pub fn spawn(name: &str, idle: Duration, mut step: impl FnMut() -> bool + Send + 'static) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let handle = std::thread::Builder::new()
            .name(name.into())
            .spawn(move || {
                while !s.load(Ordering::Acquire) {
                    if !step() {
                        std::thread::sleep(idle);
                    }
                }
            })
            .expect("spawn worker thread");
        Worker {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Keeps a master publishing its dirty ids.
pub fn master_sync_loop(master: Arc<MasterShard>, idle: Duration) -> Worker {
    let name = format!("sync-m{}", master.shard_id());
    Worker::spawn(&name, idle, move || {
        if !master.is_alive() {
            return false;
        }
        let r = master.sync_once(false);
        r.emitted > 0 && !r.stalled
    })
}

/// Keeps a replica consuming the log.
pub fn scatter_loop(replica: Arc<SlaveReplica>, idle: Duration) -> Worker {
    let name = format!("scatter-s{}r{}", replica.shard_id(), replica.replica_id());
    Worker::spawn(&name, idle, move || match replica.scatter_step() {
        Ok(r) => r.read > 0,
        Err(_) => false,
    })
}
