//! Desk-scale promptable segmentation testbed.
//!
//! The crate bundles a dense-tensor autodiff engine, a deterministic image
//! degradation pipeline, a procedural scene dataset, a miniature promptable
//! segmenter (frozen clear-image teacher), anti-degradation refinement
//! modules trained against the teacher, segmentation losses and metrics,
//! and the training/evaluation harness plus CLI that drives them.

pub mod detmath;
pub mod error;
pub mod rng;
pub mod robust;
pub mod dataset;
pub mod harness;
pub mod degrade;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    harness::cli::run(&argv)
}
