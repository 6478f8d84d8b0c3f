//! Federated LoRA with per-device dropout.
//!
//! The crate is `no_std` and only needs `alloc`. It contains:
//!
//! * [`lora`]: forward/backward passes of low-rank adapted layers, row/column
//!   dropout masks and payload accounting.
//! * [`model`]: a small multi-layer network built from adapted and frozen
//!   layers, synthetic Gaussian-cluster data and Dirichlet non-IID sharding.
//! * [`protocol`]: the server/client round engine (sub-adapter generation,
//!   local tuning, zero-padded weighted aggregation) and the Monte-Carlo
//!   gradient-error estimator.
//! * [`bounds`]: closed-form stability, generalization, gradient-error,
//!   loss-descent and convergence bounds.
//! * [`network`]: OFDMA rates, per-step latency and energy, constraint checks.
//! * [`allocator`]: joint dropout-rate / subcarrier allocation via an exact
//!   branch-and-bound and a penalized successive convex approximation.
//!
//! File formats, configuration and the command line live in the companion
//! `fedlodrop` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too; index loops
// mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod allocator;
pub mod bounds;
pub mod error;
pub mod lora;
pub mod model;
pub mod network;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
