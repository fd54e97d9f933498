//! Neural networks with embedded factor-model structure: scheduled PCA
//! layers, Soft PCA layers, diversified projections and additive
//! sub-networks, with the data generators, baselines, metrics and experiment
//! runner needed to compare them.

pub mod architectures;
pub mod autodiff;
pub mod baselines;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod reporting;
pub mod runner;
pub mod training;

pub use autodiff::{Matrix, NodeId, Tape};
pub use error::{Error, Result};
