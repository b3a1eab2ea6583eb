//! Held-out metrics and leave-one-out refits.

use serde::{Deserialize, Serialize};

use crate::baselines::{avg_predict, cv_stack_fit};
use crate::benchmark::{coverage_curve, nominal_grid, CoverageCurve};
use crate::error::Result;
use crate::model::{predict, Dataset, PredictOptions, PredictiveDistribution, PriorConfig};
use crate::scoring::crps_energy_estimate;
use crate::tailfree::ModelTree;
use crate::vi::{fit, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: f64,
    pub mean_crps: f64,
    pub coverage: CoverageCurve,
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "length mismatch");
    (pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt()
}

/// RMSE of the mean, sample CRPS and coverage of a predictive distribution.
pub fn metrics(pred: &PredictiveDistribution, targets: &[f64]) -> Result<Metrics> {
    let mean_crps = (0..pred.len())
        .map(|j| crps_energy_estimate(&pred.samples.col(j), targets[j]))
        .sum::<f64>()
        / targets.len() as f64;
    Ok(Metrics {
        n: targets.len(),
        rmse: rmse(&pred.mean, targets),
        mean_crps,
        coverage: coverage_curve(pred, targets, &nominal_grid())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub model: Metrics,
    pub avg_rmse: f64,
    pub cv_stack_rmse: f64,
    pub n_not_converged: usize,
}

/// Refits the ensemble `n` times, each time predicting the held-out row.
/// Costs `n` full fits. The held-out draws are stacked into one predictive
/// distribution whose column `i` is row `i`.
pub fn leave_one_out(
    data: &Dataset,
    tree: &ModelTree,
    priors: &PriorConfig,
    opt: &OptimizerConfig,
    calibrate: bool,
    popts: &PredictOptions,
) -> Result<LooReport> {
    let n = data.len();
    let mut means = Vec::with_capacity(n);
    let mut cv = Vec::with_capacity(n);
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut not_converged = 0;
    for i in 0..n {
        let train: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sub = data.select(&train);
        let held = data.inputs.select(&[i]);
        let f = fit(&sub, priors, tree, opt, calibrate)?;
        not_converged += usize::from(!f.converged);
        let p = predict(&f.state, &held, popts)?;
        means.push(p.mean[0]);
        draws.push(p.samples.col(0));
        cv.push(cv_stack_fit(&sub, 5.min(sub.len()).max(2))?.predict(&held)[0]);
        log::info!("leave-one-out {} of {n} done", i + 1);
    }
    let s = popts.n_samples;
    let samples = crate::linalg::Matrix::from_fn(s, n, |r, c| draws[c][r]);
    let pred = PredictiveDistribution {
        query: data.inputs.clone(),
        samples,
        mean: means,
        total_sd: vec![],
        selection_sd: vec![],
        prediction_sd: vec![],
        quantiles: vec![],
        mean_weights: crate::linalg::Matrix::zeros(0, 0),
    };
    let avg: Vec<f64> = (0..n).map(|i| avg_predict(data.base_predictions().row(i))).collect();
    Ok(LooReport {
        model: metrics(&pred, &data.targets)?,
        avg_rmse: rmse(&avg, &data.targets),
        cv_stack_rmse: rmse(&cv, &data.targets),
        n_not_converged: not_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn point_mass(values: &[f64]) -> PredictiveDistribution {
        let m = values.len();
        PredictiveDistribution {
            query: crate::model::Inputs::new(Matrix::zeros(m, 1), Matrix::zeros(m, 1)).unwrap(),
            samples: Matrix::from_fn(4, m, |_, j| values[j]),
            mean: values.to_vec(),
            total_sd: vec![0.0; m],
            selection_sd: vec![0.0; m],
            prediction_sd: vec![0.0; m],
            quantiles: vec![],
            mean_weights: Matrix::zeros(m, 1),
        }
    }

    #[test]
    fn perfect_predictions() {
        let y = [0.5, -1.0, 2.0];
        let m = metrics(&point_mass(&y), &y).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mean_crps, 0.0);
    }

    #[test]
    fn constant_predictor() {
        let y = [1.0, 2.0, 4.0];
        let m = metrics(&point_mass(&[2.0; 3]), &y).unwrap();
        assert!((m.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        // point-mass CRPS is the absolute error
        assert!((m.mean_crps - 1.0).abs() < 1e-15);
    }
}
