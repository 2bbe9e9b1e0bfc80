//! Adversarial semantic segmentation engine.
//!
//! A self-contained training stack: dense tensors with a seeded PRNG,
//! differentiable layers with hand-written backward passes, an
//! encoder-decoder generator and convolutional discriminator trained
//! adversarially, a deterministic synthetic phantom dataset, segmentation
//! metrics, and binary on-disk formats for tensors and checkpoints.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};
