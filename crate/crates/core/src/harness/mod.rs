//! Cluster launcher, synthetic workload, failure injection and reports.

pub mod cluster;
pub mod config;
pub mod faults;
pub mod freshness;
pub mod process;
pub mod report;
pub mod run;
pub mod trainer;
pub mod workload;

pub use cluster::{Cluster, ConsistencyReport};
pub use config::ClusterConfig;
pub use faults::{FaultAction, FaultPlan};
pub use run::{run_experiment, RunArtifacts, RunOptions};
