//! Layer adapters (L-adapters) and encoder adapters (E-adapters) for a
//! frozen transformer encoder.
//!
//! L-adapters transform every encoder layer's output and feed a learnable
//! softmax-weighted sum of them to a downstream head; E-adapters are
//! residual bottleneck MLPs placed right after each layer's feedforward
//! block. The crate carries its own small autodiff engine, the encoder,
//! CTC and classification heads, evaluation metrics and a seeded toy
//! experiment harness.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod experiments;
mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
