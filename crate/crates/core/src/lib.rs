//! Control plane for dynamic multi-agent workflows.
//!
//! Agent calls return futures carrying their dependencies, location and
//! lifecycle state. A component controller per agent instance routes,
//! queues, runs and migrates those futures; a global controller reads
//! per-node stores, builds a snapshot and applies operator policies.
//! Everything runs on a deterministic discrete-event simulator.

pub mod canonical;
pub mod controller;
pub mod error;
pub mod eventlog;
pub mod global;
pub mod model;
pub mod policy;
pub mod sim;
pub mod state;
pub mod store;
pub mod workflow;

pub use error::{Error, Result};
