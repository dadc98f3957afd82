//! Data-feed ingestion engine: declarative feeds, cascade networks over feed
//! joints, policy-driven congestion control and zombie-based recovery on a
//! simulated shared-nothing cluster.

pub mod adaptors;
pub mod catalog;
pub mod cluster;
pub mod dataflow;
pub mod engine;
pub mod fault;
pub mod harness;
pub mod pipeline;
pub mod runtime;
pub mod storage;
