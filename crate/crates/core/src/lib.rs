//! Adaptive Bayesian ensembles.
//!
//! Base-model predictions are combined with input-dependent weights drawn
//! from a dependent tail-free process: a tree over the base models whose
//! internal nodes split probability among their children with a tempered
//! softmax of Gaussian processes. A residual GP absorbs bias shared by all
//! base models. The posterior is fit by score-function variational inference
//! on a KL objective, optionally augmented with the CRPS of the variational
//! predictive distribution so that predictive intervals stay calibrated.
//!
//! The numeric building blocks ([`linalg`], [`gp`], [`tailfree`], [`scoring`])
//! are generic over [`Scalar`] (`f32` or `f64`); inference, baselines and the
//! benchmark run in `f64`. Aliases for the common `f64` instantiations live at
//! the crate root.

pub mod baselines;
pub mod benchmark;
pub mod error;
pub mod evaluate;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod tailfree;
pub mod vi;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tailfree::{ModelTree, TreeSpec};

pub type Matrix = linalg::Matrix<f64>;
pub type KernelConfig = gp::KernelConfig<f64>;
pub type InducingSet = gp::InducingSet<f64>;
pub type SparseGpPosterior = gp::SparseGpPosterior<f64>;
pub type GpPrior = gp::GpPrior<f64>;
pub type TemperatureSet = tailfree::TemperatureSet<f64>;
pub type NodeGpValues = tailfree::NodeGpValues<f64>;
pub type WeightMeasure = tailfree::WeightMeasure<f64>;
