//! A small neural-network training engine built around mini-batch trimming:
//! each mini-batch loss is the mean over only its highest-loss samples, with
//! the kept fraction annealed linearly from 1.0 down to 0.2 over training.
//!
//! Everything is 64-bit and deterministic for a given seed. Kernels use fixed
//! summation orders, so a trimming run with the fraction pinned at 1.0 is
//! bit-identical to an untrimmed run.
//!
//! Module map:
//!
//! - [`tensor`], [`rng`], [`kernels`]: storage, SplitMix64 randomness, naive kernels
//! - [`autodiff`]: tape-based reverse mode and finite-difference checking
//! - [`model`]: `mlp3` / `tinycnn` stacks and the per-sample loss head
//! - [`trim`]: fraction schedule, top-k selection, trimmed mean, subset recompute
//! - [`optim`]: Adam, SGD with momentum, step-decay learning rate
//! - [`data`]: synthetic blobs, IDX and CIFAR-10 parsers, batching
//! - [`harness`]: config, trials, trimming on/off comparison, CSV metrics

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trim;

pub use error::{Error, Result};
pub use tensor::Tensor;
