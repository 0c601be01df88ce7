//! Dense variational autoencoders with two Gaussian posterior families,
//! per-latent-variable importance scores, and post-training ELBO
//! optimization through encoder marginalization and averaged decoding.
//!
//! Everything is deterministic given a seed: random streams are counter
//! based and split per data item, so results do not depend on batching or
//! evaluation order.

pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod optimize;
pub mod posterior;
pub mod rng;
pub mod select;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
