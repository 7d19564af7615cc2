//! Desk-scale hierarchical VAE lab: bidirectional very-deep-VAE models with
//! gradient-smoothed scale activations, discretized mixture-of-logistics or
//! Bernoulli output heads, Adamax training with a gradient-norm skip guard,
//! and KL-based latent-space pruning.

// config validation uses `!(x > 0.0)` so NaN values are rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod image_io;
pub mod latent_analysis;
pub mod network;
pub mod objective;
pub mod optimizer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
