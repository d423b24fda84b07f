//! Multi-process mode: shard nodes as `weips node` children talking TCP.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::cluster::{open_log, stores_for, NodeControl};
use super::config::ClusterConfig;
use crate::clock::WallClock;
use crate::error::{Error, Result};
use crate::master::MasterShard;
use crate::node::{master_sync_loop, scatter_loop, MasterNode, SlaveNode};
use crate::scheduler::{ShardMap, Spawner};
use crate::slave::SlaveReplica;
use crate::wire::tcp::TcpServer;
use crate::wire::{Directory, NodeHealth, Service};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Master,
    Slave,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Master => "master",
            NodeRole::Slave => "slave",
        }
    }
}

/// Line a node prints once it accepts connections.
pub const READY_PREFIX: &str = "LISTENING ";

/// Body of `weips node`: serves one shard until stdin closes.
pub fn serve_node(
    cfg: &ClusterConfig,
    run_dir: &Path,
    role: NodeRole,
    shard_id: u32,
    replica_id: u32,
    listen: &str,
) -> Result<()> {
    let cfg = cfg.clone().resolved();
    let schema = Arc::new(cfg.model.schema()?);
    let log = open_log(&cfg, run_dir)?;
    let stores = stores_for(run_dir);
    let idle = Duration::from_millis(cfg.idle_ms);
    let t = &cfg.topology;
    let (svc, _worker): (Arc<dyn Service>, _) = match role {
        NodeRole::Master => {
            let m = Arc::new(MasterShard::new(
                &cfg.model_id,
                shard_id,
                t.masters,
                schema,
                log,
                Arc::new(WallClock::new()),
                cfg.master.clone(),
            )?);
            let w = master_sync_loop(m.clone(), idle);
            (Arc::new(MasterNode { master: m, stores }), w)
        }
        NodeRole::Slave => {
            let r = Arc::new(SlaveReplica::new(
                &cfg.model_id,
                shard_id,
                t.slaves,
                replica_id,
                schema,
                log,
                cfg.slave,
            )?);
            let w = scatter_loop(r.clone(), idle);
            (Arc::new(SlaveNode { replica: r, stores }), w)
        }
    };
    let server = TcpServer::bind(listen, svc)?;
    println!("{READY_PREFIX}{}", server.endpoint());
    // The parent holds our stdin; its exit (or an explicit close) ends us.
    let mut sink = Vec::new();
    let _ = std::io::stdin().read_to_end(&mut sink);
    drop(server);
    Ok(())
}

type Key = (NodeRole, u32, u32);

pub struct ProcessNodes {
    exe: PathBuf,
    config_path: PathBuf,
    run_dir: PathBuf,
    dir: Arc<Directory>,
    children: Mutex<BTreeMap<Key, (Child, String)>>,
}

impl ProcessNodes {
    pub fn new(exe: &Path, cfg: &ClusterConfig, run_dir: &Path) -> Result<Self> {
        let config_path = run_dir.join("cluster.toml");
        std::fs::write(&config_path, cfg.to_toml()?)?;
        Ok(ProcessNodes {
            exe: exe.to_path_buf(),
            config_path,
            run_dir: run_dir.to_path_buf(),
            dir: Arc::new(Directory::new()),
            children: Mutex::default(),
        })
    }

    fn spawn(&self, role: NodeRole, shard_id: u32, replica_id: u32) -> Result<String> {
        let mut child = Command::new(&self.exe)
            .arg("node")
            .arg(role.as_str())
            .arg("--config")
            .arg(&self.config_path)
            .arg("--run-dir")
            .arg(&self.run_dir)
            .arg("--shard")
            .arg(shard_id.to_string())
            .arg("--replica")
            .arg(replica_id.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line)?;
        let Some(ep) = line.trim().strip_prefix(READY_PREFIX) else {
            let _ = child.kill();
            return Err(Error::Unavailable {
                shard_id,
                reason: format!("{} node did not start: {line:?}", role.as_str()),
            });
        };
        let ep = ep.to_string();
        if let Some((mut old, _)) = self.children.lock().insert((role, shard_id, replica_id), (child, ep.clone())) {
            let _ = old.kill();
            let _ = old.wait();
        }
        Ok(ep)
    }

    fn kill(&self, key: Key) -> Result<()> {
        let (mut child, ep) = self
            .children
            .lock()
            .remove(&key)
            .ok_or_else(|| Error::Config(format!("no {} node {}/{}", key.0.as_str(), key.1, key.2)))?;
        child.kill()?;
        let _ = child.wait();
        self.dir.unregister(&ep);
        Ok(())
    }

    /// Operating-system process ids by (role, shard, replica).
    pub fn pids(&self) -> BTreeMap<Key, u32> {
        self.children.lock().iter().map(|(k, (c, _))| (*k, c.id())).collect()
    }

    /// Waits until no master has pending ids and every replica reports the
    /// same offsets twice in a row with all masters idle.
    pub fn quiesce(&self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut last: Option<Vec<BTreeMap<u32, u64>>> = None;
        loop {
            let eps: Vec<(NodeRole, String)> = self.children.lock().iter().map(|(k, (_, ep))| (k.0, ep.clone())).collect();
            let mut idle = true;
            let mut offsets = Vec::new();
            for (_, ep) in &eps {
                match self.dir.client(ep).and_then(|c| c.health()) {
                    Ok(NodeHealth::Master(h)) => idle &= h.pending == 0,
                    Ok(NodeHealth::Slave(h)) => offsets.push(h.offsets),
                    _ => {}
                }
            }
            let stable = last.as_ref() == Some(&offsets) && offsets.windows(2).all(|w| w[0] == w[1]);
            if idle && stable {
                return Ok(());
            }
            last = Some(offsets);
            if Instant::now() >= deadline {
                return Err(Error::Unavailable {
                    shard_id: 0,
                    reason: "nodes did not quiesce".into(),
                });
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl Spawner for ProcessNodes {
    fn spawn_master(&self, _: &ShardMap, shard_id: u32) -> Result<String> {
        self.spawn(NodeRole::Master, shard_id, 0)
    }

    fn spawn_slave(&self, _: &ShardMap, shard_id: u32, replica_id: u32) -> Result<String> {
        self.spawn(NodeRole::Slave, shard_id, replica_id)
    }
}

impl NodeControl for ProcessNodes {
    fn kill_master(&self, shard_id: u32) -> Result<()> {
        self.kill((NodeRole::Master, shard_id, 0))
    }

    fn kill_replica(&self, shard_id: u32, replica_id: u32) -> Result<()> {
        self.kill((NodeRole::Slave, shard_id, replica_id))
    }

    fn shutdown(&self) {
        for (_, (mut c, _)) in std::mem::take(&mut *self.children.lock()) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for ProcessNodes {
    fn drop(&mut self) {
        self.shutdown();
    }
}
