//! A fused online-learning parameter server.
//!
//! Master shards train sparse models from pushed gradients and stream
//! full-value parameter updates through a partitioned log; slave shards
//! consume that log into versioned serving tables. A scheduler keeps the
//! shard map, checkpoints and replica health in a CAS registry, and the
//! monitor turns progressive-validation metrics into rollback decisions.

pub mod client;
pub mod clock;
pub mod error;
pub mod exec;
pub mod harness;
pub mod master;
pub mod model;
pub mod monitor;
pub mod node;
pub mod plog;
pub mod scheduler;
pub mod slave;
pub mod wire;

pub use error::{Error, Result};
