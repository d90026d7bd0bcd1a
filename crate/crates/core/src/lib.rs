//! Compile declarative abstract-screening tasks plus gold examples into
//! content-hashed prompt-program bundles, then screen, verify and replay
//! them offline.

pub mod artifact;
pub mod backend;
pub mod canonical;
pub mod compiler;
pub mod dataset;
pub mod metrics;
pub mod rng;
pub mod screening;
pub mod taskspec;

mod parallel;

/// Recorded in run logs, configs and manifests.
pub const TOOL_VERSION: &str = concat!("slrc ", env!("CARGO_PKG_VERSION"));
