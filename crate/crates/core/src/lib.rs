//! Context distillation for injecting entity knowledge into a small
//! decoder-only language model.

pub mod baselines;
pub mod distiller;
pub mod error;
pub mod evalsuite;
pub mod lm;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod world;

pub use error::{Error, Result};
