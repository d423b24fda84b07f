use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParams(String),

    #[error("invalid slot: {0}")]
    InvalidSlot(String),

    #[error("numeric overflow updating feature {feature_id}")]
    NumericOverflow { feature_id: u64 },

    #[error("partition {partition} out of range (log has {num_partitions})")]
    NoSuchPartition { partition: u32, num_partitions: u32 },

    #[error("append to partition {partition} failed: {reason}")]
    AppendFailed { partition: u32, reason: String },

    #[error("offset {start} out of range for partition {partition} (tail {tail})")]
    OffsetOutOfRange { partition: u32, start: u64, tail: u64 },

    #[error("corrupt log frame in partition {partition}: {reason}")]
    CorruptFrame { partition: u32, reason: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("feature {feature_id} is not owned by shard {shard_id} of {num_shards}")]
    Routing {
        feature_id: u64,
        shard_id: u32,
        num_shards: u32,
    },

    #[error("model mismatch: expected {expected}, got {got}")]
    ModelMismatch { expected: String, got: String },

    #[error("checkpoint failed: {0}")]
    CheckpointFailed(String),

    #[error("corrupt checkpoint v{version} shard {shard}: {reason}")]
    CorruptCheckpoint {
        version: u64,
        shard: u32,
        reason: String,
    },

    #[error("incomplete checkpoint set v{version}: {reason}")]
    IncompleteCheckpoint { version: u64, reason: String },

    #[error("no usable checkpoint for model {0}")]
    NoCheckpoint(String),

    #[error("replay offset out of range, reload from a checkpoint version: {0}")]
    RecoveryNeeded(String),

    #[error("shard {shard_id} unavailable: {reason}")]
    Unavailable { shard_id: u32, reason: String },

    #[error("slave shard {shard_id} is down: no healthy replica")]
    ShardDown { shard_id: u32 },

    #[error("registry conflict on {key}")]
    Conflict { key: String },

    #[error("already registered: {0}")]
    AlreadyRegistered(String),

    #[error("lease {0} expired or unknown")]
    LeaseExpired(u64),

    #[error("downgrade aborted: {0}")]
    DowngradeAborted(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("wire protocol: {0}")]
    Wire(String),

    #[error("remote error ({kind}): {message}")]
    Remote { kind: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used when errors cross the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidHyperParams(_) => "invalid-hyperparams",
            Error::InvalidSlot(_) => "invalid-slot",
            Error::NumericOverflow { .. } => "numeric-overflow",
            Error::NoSuchPartition { .. } => "no-such-partition",
            Error::AppendFailed { .. } => "append-failed",
            Error::OffsetOutOfRange { .. } => "out-of-range",
            Error::CorruptFrame { .. } => "corrupt-frame",
            Error::Decode(_) => "decode",
            Error::Routing { .. } => "routing",
            Error::ModelMismatch { .. } => "model-mismatch",
            Error::CheckpointFailed(_) => "checkpoint-failed",
            Error::CorruptCheckpoint { .. } => "corrupt-checkpoint",
            Error::IncompleteCheckpoint { .. } => "incomplete-set",
            Error::NoCheckpoint(_) => "no-checkpoint",
            Error::RecoveryNeeded(_) => "recovery-needed",
            Error::Unavailable { .. } => "unavailable",
            Error::ShardDown { .. } => "shard-down",
            Error::Conflict { .. } => "conflict",
            Error::AlreadyRegistered(_) => "already-registered",
            Error::LeaseExpired(_) => "lease-expired",
            Error::DowngradeAborted(_) => "downgrade-aborted",
            Error::Config(_) => "config",
            Error::Wire(_) => "wire",
            Error::Remote { .. } => "remote",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether a client should try another replica.
    pub fn is_unavailable(&self) -> bool {
        match self {
            Error::Unavailable { .. } | Error::Io(_) | Error::Wire(_) => true,
            Error::Remote { kind, .. } => kind == "unavailable",
            _ => false,
        }
    }
}
