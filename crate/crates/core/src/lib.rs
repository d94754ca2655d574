//! Discretization-decoupled neural operator for subsurface surrogate modeling.
//!
//! Three embedders (topology, heterogeneous fields, homogeneous case
//! parameters) map their inputs into a shared latent space; the latents are
//! summed and decoded pointwise. Training draws a fresh random subset of
//! space-time lattice points for every update, so the model can later be
//! queried at any point count and any location inside the domain.
//!
//! Modules:
//! - [`kernel`]: dense f64 layers with forward/backward passes and MSE.
//! - [`model`]: embedder stacks, latent fusion, parameter/MAC accounting.
//! - [`sampler`]: lattice subsampling and batch assembly.
//! - [`optim`]: ADAM, cosine learning rate, two-phase training loop.
//! - [`metrics`]: RMSE, MAE, per-timestamp max MAE, pointwise difference.
//! - [`fom`]: synthetic heterogeneous diffusion data generator.
//! - [`dataio`]: normalization and binary sample/checkpoint files.
//! - [`inference`]: batched full-grid evaluation.

// `!(a <= b)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod fom;
pub mod inference;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampler;

pub use error::{Error, Result};
pub use kernel::{Matrix, Mode};
pub use model::{build_model, Model, ModelConfig, QueryBatch};
