//! Simulated serverless cluster for exercising the truffle sidecar at desk
//! scale.
//!
//! A [`cluster::Cluster`] runs one sidecar per simulated node, a platform
//! that scales functions from zero with configurable scheduling and
//! cold-start delays, and an in-memory KVS/object store with linear latency
//! profiles. Every delay is a real sleep multiplied by the cluster's scale
//! factor; records report times divided by it again, in model milliseconds.

pub mod backend;
pub mod cluster;
pub mod config;
pub mod platform;
pub mod profile;
pub mod record;
pub mod runtime;

pub use backend::StorageBackend;
pub use cluster::{deploy, Cluster, DeployError, RunOptions};
pub use config::{chain, reference_timings, video, ClusterConfig, ConfigError, FunctionSpec, Topology, WorkflowSpec};
pub use profile::BackendLatencyProfile;
pub use record::{FailurePhase, FunctionPhases, MeasurementRecord, Mode};
pub use runtime::FunctionResponse;
