//! Segmented consistency distillation for conditional video diffusion at desk scale.

pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod optim;
pub mod oracle;
pub mod sampling;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
