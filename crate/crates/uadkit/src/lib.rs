//! Unsupervised anomaly detection in volumetric images with variational
//! autoencoders, built from scratch: tensors with reverse-mode autodiff,
//! four VAE architectures (spatial/dense bottleneck in 2D/3D), a
//! collapse-robust training loss with cyclical KL annealing, and the full
//! reconstruction-based segmentation pipeline with synthetic phantom data.

pub mod benchmark;
pub mod config;
pub mod error;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod volume;

pub use error::{ConfigError, FormatError, Result, TensorError, UadError};
