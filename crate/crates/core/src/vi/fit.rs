use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, PriorConfig};
use crate::tailfree::ModelTree;

use super::engine::{step_estimate, ObjectiveEstimate, Prepared};
use super::state::VariationalState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Fractions of `max_steps` at which the step size is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub max_steps: usize,
    pub mc_samples: usize,
    pub crps_weight: f64,
    /// Relative decrease of the smoothed objective over the final tenth of
    /// the run above which the fit is reported as not converged.
    pub tolerance: f64,
    /// Decay of the running mean of squared gradients.
    pub rms_decay: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            decay_at: vec![0.5, 0.75],
            decay_factor: 0.3,
            max_steps: 5000,
            mc_samples: 16,
            crps_weight: 1.0,
            tolerance: 0.01,
            rms_decay: 0.9,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if self.mc_samples < 2 {
            return Err(Error::invalid("mc_samples must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::invalid("rms_decay must lie in [0, 1)"));
        }
        if !(self.crps_weight >= 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::invalid("crps_weight and tolerance must be non-negative"));
        }
        Ok(())
    }

    pub fn step_size_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.max_steps.max(1) as f64;
        let decays = self.decay_at.iter().filter(|&&d| frac >= d).count();
        self.step_size * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: VariationalState,
    pub trace: Vec<ObjectiveEstimate>,
    /// False when the objective was still falling beyond tolerance at the end.
    pub converged: bool,
}

/// Stochastic optimization of `neg_elbo + crps_weight * crps`, or of the
/// negative ELBO alone when `calibrate` is false (in which case no CRPS term
/// is ever evaluated).
pub fn fit(
    data: &Dataset,
    priors: &PriorConfig,
    tree: &ModelTree,
    opt: &OptimizerConfig,
    calibrate: bool,
) -> Result<FitResult> {
    let state = VariationalState::initialize(data, tree, priors)?;
    fit_from(state, data, opt, calibrate)
}

/// Continues optimization from an existing state.
pub fn fit_from(
    mut state: VariationalState,
    data: &Dataset,
    opt: &OptimizerConfig,
    calibrate: bool,
) -> Result<FitResult> {
    opt.validate()?;
    let prep = Prepared::new(&state, data)?;
    let mut theta = state.params();
    let mut acc = vec![0.0; theta.len()];
    let mut trace = Vec::with_capacity(opt.max_steps);
    let weight = calibrate.then_some(opt.crps_weight);
    let start = state.step_count;
    for step in 0..opt.max_steps {
        let stream = ((start + step) as u64) << 24;
        let (est, grad) = step_estimate(&state, &prep, opt.mc_samples, opt.seed, stream, weight)?;
        let lr = opt.step_size_at(step);
        let first = step == 0 && start == 0;
        for ((t, a), g) in theta.iter_mut().zip(acc.iter_mut()).zip(&grad) {
            *a = if first {
                g * g
            } else {
                opt.rms_decay * *a + (1.0 - opt.rms_decay) * g * g
            };
            *t -= lr * g / (a.sqrt() + 1e-8);
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteDensity(format!("variational parameters at step {step}")));
        }
        state.set_params(&theta);
        state.step_count += 1;
        trace.push(est);
    }
    state.sync_kernels();
    let converged = converged(&trace, opt.tolerance);
    if !converged {
        log::warn!(
            "objective still decreasing after {} steps; consider more steps",
            opt.max_steps
        );
    }
    Ok(FitResult {
        state,
        trace,
        converged,
    })
}

/// Compares the mean objective over the final tenth of the run with the
/// tenth before it. The run counts as still decreasing only when the drop
/// exceeds both `tolerance * max(|last|, 1)` and twice the Monte-Carlo
/// standard error of the difference of the two window means.
fn converged(trace: &[ObjectiveEstimate], tolerance: f64) -> bool {
    let w = trace.len() / 10;
    if w < 5 {
        return true;
    }
    let stats = |s: &[ObjectiveEstimate]| {
        let n = s.len() as f64;
        let m = s.iter().map(|e| e.total).sum::<f64>() / n;
        let var = s.iter().map(|e| (e.total - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let (last, v1) = stats(&trace[trace.len() - w..]);
    let (prev, v0) = stats(&trace[trace.len() - 2 * w..trace.len() - w]);
    let drop = prev - last;
    drop <= tolerance * last.abs().max(1.0) || drop <= 2.0 * (v0 + v1).sqrt()
}

/// Writes the trace as CSV with columns `step,neg_elbo,crps,total`; the crps
/// cell is empty for KL-only fits.
pub fn write_trace<W: Write>(trace: &[ObjectiveEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "neg_elbo", "crps", "total"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            e.neg_elbo.to_string(),
            e.crps.map(|c| c.to_string()).unwrap_or_default(),
            e.total.to_string(),
        ])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(trace: &[ObjectiveEstimate], path: &Path) -> Result<()> {
    let mut buf = vec![];
    write_trace(trace, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}
