//! Multi-task variational autoencoder with a split group-invariant /
//! group-specific latent space for multi-cohort tabular risk prediction.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod crossval;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod interpret;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tsne;
pub mod training;

pub use error::{Error, MathError, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
