//! Token pruning for Vision Transformers, built on a small reverse-mode
//! autodiff engine.
//!
//! The crate provides, from the bottom up:
//!
//! - [`tensor`]: dense 2-D tensors on an arena tape with reverse-mode AD;
//! - [`nn`]: linear / layer-norm / MLP building blocks and initializers;
//! - [`vit`]: a compact pre-norm Vision Transformer backbone;
//! - [`cropr`]: the cross-attention pruning module (scorer, router,
//!   aggregator, auxiliary heads) and its folded inference form;
//! - [`schedule`]: pruning schedules and token-count bookkeeping;
//! - [`selectors`]: non-learned token selection baselines;
//! - [`fusion`]: strategies for reintroducing pruned tokens before the
//!   final block, including last-layer fusion;
//! - [`flops`]: an analytic cost model for pruned and unpruned forwards;
//! - [`synth`]: seeded synthetic tasks with known informative tokens;
//! - [`model`], [`train`]: an end-to-end pipeline with training utilities;
//! - [`bench`]: wall-clock measurement helpers for throughput runs;
//! - [`config`]: the JSON run configuration shared by the CLI tools.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cropr;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod model;
pub mod train;
pub mod nn;
pub mod scalar;
pub mod schedule;
pub mod selectors;
pub mod synth;
pub mod tensor;
pub mod vit;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{CroprError, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, IGNORE_LABEL};
