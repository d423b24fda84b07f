//! Request/response protocol shared by masters, slaves and the scheduler.
//!
//! Every message is one frame: a little-endian `u32` byte length followed by
//! a JSON object whose `type` field names the message. The field-by-field
//! layout is in `docs/PROTOCOL.md`. In-process endpoints skip encoding and
//! call the [`Service`] directly; TCP endpoints go through [`tcp`].

mod frame;
pub mod int_keys;
pub mod tcp;

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use frame::{read_frame, write_frame, MAX_FRAME};

use crate::error::{Error, Result};
use crate::master::{CheckpointDest, CheckpointMeta, MasterHealth, PushAck, RecoveryReport};
use crate::model::ParameterSlot;
use crate::scheduler::ShardMap;
use crate::slave::SlaveHealth;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Request {
    PushGrad {
        model_id: String,
        updates: Vec<(u64, ParameterSlot)>,
    },
    PullParams {
        model_id: String,
        ids: Vec<u64>,
    },
    SaveCkpt {
        model_id: String,
        version: u64,
        dest: CheckpointDest,
    },
    LoadCkpt {
        model_id: String,
        version: u64,
        dest: CheckpointDest,
    },
    Health,
    PullServing {
        model_id: String,
        ids: Vec<u64>,
    },
    LoadVersion {
        model_id: String,
        /// `None` rebuilds from an empty table by replaying the whole log.
        version: Option<u64>,
    },
    SwitchVersion {
        model_id: String,
        version: u64,
    },
    TriggerCkpt {
        model_id: String,
        dest: CheckpointDest,
    },
    Status {
        model_id: String,
    },
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::PushGrad { .. } => "PUSH_GRAD",
            Request::PullParams { .. } => "PULL_PARAMS",
            Request::SaveCkpt { .. } => "SAVE_CKPT",
            Request::LoadCkpt { .. } => "LOAD_CKPT",
            Request::Health => "HEALTH",
            Request::PullServing { .. } => "PULL_SERVING",
            Request::LoadVersion { .. } => "LOAD_VERSION",
            Request::SwitchVersion { .. } => "SWITCH_VERSION",
            Request::TriggerCkpt { .. } => "TRIGGER_CKPT",
            Request::Status { .. } => "STATUS",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
pub enum NodeHealth {
    Master(MasterHealth),
    Slave(SlaveHealth),
    Scheduler { models: Vec<String> },
}

impl NodeHealth {
    pub fn alive(&self) -> bool {
        match self {
            NodeHealth::Master(h) => h.alive,
            NodeHealth::Slave(h) => h.alive,
            NodeHealth::Scheduler { .. } => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Response {
    PushAck { ack: PushAck },
    Params { params: Vec<(u64, ParameterSlot)> },
    CkptSaved { meta: CheckpointMeta },
    CkptLoaded { report: RecoveryReport },
    Health { health: NodeHealth },
    VersionLoaded { version: u64 },
    VersionSwitched { version: u64 },
    CkptTriggered { version: u64, shards: Vec<CheckpointMeta> },
    Status { shard_map: Box<ShardMap> },
    Error { kind: String, message: String },
}

impl Response {
    pub fn error(e: &Error) -> Self {
        let kind = match e {
            // Keep the original tag when relaying a remote failure.
            Error::Remote { kind, .. } => kind.clone(),
            other => other.kind().to_string(),
        };
        Response::Error {
            kind,
            message: e.to_string(),
        }
    }

    pub fn from_result<T>(r: Result<T>, ok: impl FnOnce(T) -> Response) -> Self {
        match r {
            Ok(v) => ok(v),
            Err(e) => Response::error(&e),
        }
    }

    /// Turns an `ERROR` response into `Err`.
    pub fn into_result(self) -> Result<Response> {
        match self {
            Response::Error { kind, message } => Err(Error::Remote { kind, message }),
            r => Ok(r),
        }
    }
}

fn unexpected(want: &str, got: &Response) -> Error {
    Error::Wire(format!("expected {want}, got {got:?}"))
}

/// A node that answers requests.
pub trait Service: Send + Sync {
    fn handle(&self, req: Request) -> Response;
}

/// Something requests can be sent to.
pub trait Client: Send + Sync {
    fn call(&self, req: Request) -> Result<Response>;

    fn push_grad(&self, model_id: &str, updates: Vec<(u64, ParameterSlot)>) -> Result<PushAck> {
        match self.call(Request::PushGrad {
            model_id: model_id.into(),
            updates,
        })?
        .into_result()?
        {
            Response::PushAck { ack } => Ok(ack),
            r => Err(unexpected("PUSH_ACK", &r)),
        }
    }

    fn pull_params(&self, model_id: &str, ids: Vec<u64>) -> Result<Vec<(u64, ParameterSlot)>> {
        match self.call(Request::PullParams {
            model_id: model_id.into(),
            ids,
        })?
        .into_result()?
        {
            Response::Params { params } => Ok(params),
            r => Err(unexpected("PARAMS", &r)),
        }
    }

    fn pull_serving(&self, model_id: &str, ids: Vec<u64>) -> Result<Vec<(u64, ParameterSlot)>> {
        match self.call(Request::PullServing {
            model_id: model_id.into(),
            ids,
        })?
        .into_result()?
        {
            Response::Params { params } => Ok(params),
            r => Err(unexpected("PARAMS", &r)),
        }
    }

    fn save_ckpt(&self, model_id: &str, version: u64, dest: CheckpointDest) -> Result<CheckpointMeta> {
        match self.call(Request::SaveCkpt {
            model_id: model_id.into(),
            version,
            dest,
        })?
        .into_result()?
        {
            Response::CkptSaved { meta } => Ok(meta),
            r => Err(unexpected("CKPT_SAVED", &r)),
        }
    }

    fn load_ckpt(&self, model_id: &str, version: u64, dest: CheckpointDest) -> Result<RecoveryReport> {
        match self.call(Request::LoadCkpt {
            model_id: model_id.into(),
            version,
            dest,
        })?
        .into_result()?
        {
            Response::CkptLoaded { report } => Ok(report),
            r => Err(unexpected("CKPT_LOADED", &r)),
        }
    }

    fn health(&self) -> Result<NodeHealth> {
        match self.call(Request::Health)?.into_result()? {
            Response::Health { health } => Ok(health),
            r => Err(unexpected("HEALTH", &r)),
        }
    }

    fn load_version(&self, model_id: &str, version: Option<u64>) -> Result<u64> {
        match self.call(Request::LoadVersion {
            model_id: model_id.into(),
            version,
        })?
        .into_result()?
        {
            Response::VersionLoaded { version } => Ok(version),
            r => Err(unexpected("VERSION_LOADED", &r)),
        }
    }

    fn switch_version(&self, model_id: &str, version: u64) -> Result<u64> {
        match self.call(Request::SwitchVersion {
            model_id: model_id.into(),
            version,
        })?
        .into_result()?
        {
            Response::VersionSwitched { version } => Ok(version),
            r => Err(unexpected("VERSION_SWITCHED", &r)),
        }
    }

    fn trigger_ckpt(&self, model_id: &str, dest: CheckpointDest) -> Result<(u64, Vec<CheckpointMeta>)> {
        match self.call(Request::TriggerCkpt {
            model_id: model_id.into(),
            dest,
        })?
        .into_result()?
        {
            Response::CkptTriggered { version, shards } => Ok((version, shards)),
            r => Err(unexpected("CKPT_TRIGGERED", &r)),
        }
    }

    fn status(&self, model_id: &str) -> Result<ShardMap> {
        match self.call(Request::Status {
            model_id: model_id.into(),
        })?
        .into_result()?
        {
            Response::Status { shard_map } => Ok(*shard_map),
            r => Err(unexpected("STATUS", &r)),
        }
    }
}

/// Calls an in-process service without encoding.
pub struct LocalClient(pub Arc<dyn Service>);

impl Client for LocalClient {
    fn call(&self, req: Request) -> Result<Response> {
        Ok(self.0.handle(req))
    }
}

/// Resolves endpoint strings to clients.
///
/// `local:<name>` names a service registered in this process; `tcp:<addr>`
/// connects over TCP. An unregistered local name behaves like a dead host.
#[derive(Default)]
pub struct Directory {
    local: RwLock<HashMap<String, Arc<dyn Service>>>,
    tcp: RwLock<HashMap<String, Arc<tcp::TcpClient>>>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_local(&self, name: &str, svc: Arc<dyn Service>) -> String {
        self.local.write().insert(name.to_string(), svc);
        format!("local:{name}")
    }

    pub fn unregister(&self, endpoint: &str) {
        if let Some(name) = endpoint.strip_prefix("local:") {
            self.local.write().remove(name);
        } else if let Some(addr) = endpoint.strip_prefix("tcp:") {
            self.tcp.write().remove(addr);
        }
    }

    pub fn client(&self, endpoint: &str) -> Result<Arc<dyn Client>> {
        if let Some(name) = endpoint.strip_prefix("local:") {
            let svc = self.local.read().get(name).cloned();
            return match svc {
                Some(s) => Ok(Arc::new(LocalClient(s))),
                None => Err(Error::Wire(format!("no such endpoint {endpoint}"))),
            };
        }
        if let Some(addr) = endpoint.strip_prefix("tcp:") {
            if let Some(c) = self.tcp.read().get(addr) {
                return Ok(c.clone());
            }
            let c = Arc::new(tcp::TcpClient::new(addr));
            self.tcp.write().entry(addr.to_string()).or_insert(c.clone());
            return Ok(c);
        }
        Err(Error::Config(format!("endpoint {endpoint:?} is neither local: nor tcp:")))
    }

    pub fn call(&self, endpoint: &str, req: Request) -> Result<Response> {
        self.client(endpoint)?.call(req)
    }
}
