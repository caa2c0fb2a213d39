//! Deterministic discrete-event simulator of a CXL-attached JBOF whose SSDs
//! lend idle firmware cores and DRAM to each other.

// Range checks are written to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod engine;
pub mod error;
pub mod fabric;
pub mod flash;
pub mod ftl;
pub mod harvest;
pub mod host;
pub mod mapping;
pub mod metrics;
pub mod presets;
pub mod sim;
pub mod ssd;
pub mod workload;

pub use error::{Result, SimError};
