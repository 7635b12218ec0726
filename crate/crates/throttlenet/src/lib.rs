//! Runtime-throttleable neural networks via block-level gating.
//!
//! A throttleable network exposes a control signal `u` in [0, 1] that selects
//! a compute/accuracy operating point at inference time. The crate provides:
//!
//! - a small f64 tensor core with reverse-mode automatic differentiation
//!   ([`tensor`]),
//! - gated modules with gate normalization, utilization accounting, and
//!   complexity penalties ([`gating`]),
//! - static (nested / independent / depthwise-nested) and learned gate
//!   strategies with REINFORCE and binary-Concrete estimators
//!   ([`strategies`]),
//! - desk-scale throttleable CNN/MLP architectures ([`arch`]),
//! - the two-phase training procedure ([`train`]),
//! - a u-sweep evaluation harness producing accuracy-vs-utilization curves
//!   ([`eval`]),
//! - dataset ingestion and synthetic data ([`data`]),
//! - and a reproducible experiment CLI ([`cli`]).

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod gating;
pub mod rng;
pub mod strategies;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, NodeId, OpKind, Tensor, TensorError};
