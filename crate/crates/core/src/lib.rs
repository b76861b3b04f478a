//! Deterministic simulator of synchronous distributed SGD over heterogeneous
//! data streams.
//!
//! Devices receive samples at their own streaming rate into per-device
//! buffers. Each global iteration every device draws a batch, computes an
//! exact gradient on a small classifier, optionally sparsifies it through an
//! adaptive Top-k gate, and the gradients are combined by a rate-weighted (or
//! uniform) fold before one identical optimizer step on every replica. Time
//! is simulated: streaming wait, an affine compute cost and a ring-allreduce
//! communication cost advance the clock.
//!
//! Modules:
//! - [`streams`]: rate sampling, stream buffers, retention, queue-growth model
//! - [`datagen`]: synthetic data, IID / non-IID partitions, data injection
//! - [`nn`]: classifiers with exact gradients, momentum SGD, LR scaling
//! - [`comm`]: aggregation, Top-k, compression gate, volume and cost models
//! - [`engine`]: the simulated training loop and metrics
//! - [`cli`]: experiment files, runs, sweeps and the buffer-model table

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod comm;
pub mod datagen;
pub mod engine;
mod error;
pub mod nn;
pub mod seed;
pub mod streams;

pub use error::{Error, Result};

/// `ceil(x)` as a count, tolerant of representation error just above an
/// integer (`0.7 * 10` must count as 7, not 8).
pub(crate) fn ceil_count(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x - 1e-9).ceil().max(0.0) as usize
    }
}
