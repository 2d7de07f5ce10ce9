//! Conflict-aware multivariate time-series anomaly detection.
//!
//! The crate is `no_std` and only needs `alloc`. It carries everything that is
//! pure computation:
//!
//! - [`tensor`], [`tape`] and [`optim`]: dense tensors, a reverse-mode gradient
//!   tape, Adam and a cosine learning-rate schedule.
//! - [`data`]: series matrices, MinMax scaling and sliding-window samples.
//! - [`model`]: convolutional experts, per-metric personalized/shared gates and
//!   per-metric towers, with every ablation variant.
//! - [`train`]: the prediction loss and the mini-batch training loop.
//! - [`eval`]: anomaly scores, point adjustment, k-th point adjustment,
//!   best-F1 threshold search and multi-entity aggregation.
//!
//! File IO, checkpoints and the command line live in the companion `cad` crate.
#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
