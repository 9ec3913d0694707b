//! Declarative serverless dataflow pipelines executed on a deterministic
//! function-as-a-service simulator.

pub mod bench;
pub mod catalog;
pub mod config;
pub mod format;
pub mod kernels;
pub mod orchestrator;
pub mod pipeline;
pub mod primitives;
pub mod provision;
pub mod samples;
pub mod scheduler;
pub mod sim;
pub mod store;
pub mod workload;
