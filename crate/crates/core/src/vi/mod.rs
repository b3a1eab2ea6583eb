//! Calibrated variational inference.
//!
//! `q(z)` factorizes into one whitened sparse-GP posterior per weight GP and
//! for the residual process, and independent log-normals for temperatures,
//! the noise scale and the kernel lengthscales. All gradients are
//! score-function estimates. The objective is the negative ELBO, optionally
//! plus the mean CRPS of the variational predictive law at the data points.
//! Objective values refer to the standardized target scale.

mod engine;
mod fit;
mod state;

pub use engine::{
    crps_evaluations, crps_objective, elbo_estimate, objective_estimate, score_grad_crps, score_grad_kl,
    GradientEstimate, ObjectiveEstimate,
};
pub use fit::{fit, fit_from, write_trace, write_trace_file, FitResult, OptimizerConfig};
pub use state::{Draw, HyperRole, LatentSampler, LogNormalFactor, ParamKind, VariationalState};
