//! Event-decay convolution networks for event-camera streams.
//!
//! The building block is a convolutional neuron whose temporal kernel is
//! constrained to an exponential decay. That constraint makes the
//! spatio-temporal convolution separable: a 2-D spatial convolution per time
//! slice plus a one-step recursion on the previous output, so inference over
//! a stream costs O(1) work per incoming slice regardless of history length.
//!
//! Modules:
//!
//! - [`tensor`] — dense row-major tensors and the raw conv kernels
//! - [`autodiff`] — reverse-mode differentiation tape over those ops
//! - [`events`] — event parsing, binary event volumes, observation masks
//! - [`edec`] — the decay-convolution layer in dense, streaming and masked
//!   (partial-convolution) modes
//! - [`network`] — layer composition, heads, and presets
//! - [`train`] — optimizer and training loop
//! - [`metrics`] — losses and evaluation metrics
//! - [`stream`] — stateful streaming sessions and the latency harness
//! - [`synth`] — deterministic synthetic event scenes with exact ground truth
//! - [`config`] — text config parsing
//! - [`checkpoint`] — binary model serialization

// Strided tensor math reads clearest with explicit index loops.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod edec;
pub mod error;
pub mod events;
pub mod metrics;
pub mod network;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
