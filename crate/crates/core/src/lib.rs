//! Federated-learning simulator and normalization laboratory.

pub mod analysis;
pub mod config;
pub mod data;
pub mod equivalence;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod norm;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
