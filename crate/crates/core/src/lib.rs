//! Multi-scale multi-task interaction network for dense prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`gradcheck`]: dense tensors, the
//!   reverse-mode tape, learnable parameters and finite-difference checks.
//! - [`blocks`]: residual blocks, squeeze-and-excitation gates, the
//!   cross-task spatial attention transform and task heads.
//! - [`model`]: backbone, feature propagation, per-scale distillation and
//!   multi-scale aggregation.
//! - [`training`], [`eval`]: losses, deep supervision, the optimizer loop,
//!   task metrics and the relative multi-task performance score.
//! - [`affinity`], [`synth`], [`config`]: the cross-task pixel affinity
//!   study, the synthetic scene generator, and run configuration files.

mod bytes;
mod compensated;
mod kernels;

pub mod affinity;
pub mod blocks;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
