//! Harvesting control plane: descriptors, miss-ratio curves, trigger
//! policies and the redo log protecting offsite mapping entries.

pub mod descriptor;
pub mod mrc;
pub mod policy;
pub mod redolog;
