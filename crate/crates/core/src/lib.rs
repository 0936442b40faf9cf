//! Coding-rate-reduction overfitting indicator and the UMM bi-level
//! fine-tuner, on a synthetic structural-causal-model dataset.

pub mod coding_rate;
pub mod commands;
pub mod config;
pub mod cpa;
pub mod error;
pub mod linalg;
pub mod mlp;
pub mod monitor;
pub mod rng;
pub mod scm;
pub mod ssl;
pub mod train;
pub mod umm;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::Rng;
