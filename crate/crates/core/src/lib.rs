//! Multigrid training for video models.
//!
//! The crate is organised bottom-up:
//!
//! - [`sampling_grid`]: sampling grids (span, stride, offset), the resampler and
//!   randomized training-grid draws.
//! - [`schedule`]: compiles a baseline recipe plus a cycle configuration into a
//!   per-iteration [`schedule::CompiledPlan`].
//! - [`accounting`]: epochs, clip totals and clip-volume ratios of plans.
//! - [`nn`]: dense tensors and a small 3D CNN with hand-written backward passes.
//! - [`synth`]: a deterministic synthetic moving-blob video dataset.
//! - [`trainer`]: runs a plan against the model and evaluates with multi-clip
//!   testing.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iteration otherwise. Both paths
//! produce bit-identical results.

pub mod accounting;
pub mod clipbin;
pub mod error;
pub mod nn;
pub mod par;
pub mod sampling_grid;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
