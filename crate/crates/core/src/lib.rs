//! Adversarial training with nearest-neighbor projection removal, at desk scale.
//!
//! The crate covers the full loop: a small reverse-mode tensor library,
//! MLP/CNN classifiers, L∞ PGD/FGSM attacks, the projection-removal loss,
//! SGD training, separability diagnostics and an experiment runner.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod projection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
