//! Comparison ensembles: simple averaging, simplex-constrained stacking,
//! linear stacking, additive spline stacking, and a linear stack with a
//! smoothing-spline term in the input.
//!
//! The three regression baselines report a Gaussian predictive distribution
//! whose sd is the root mean squared out-of-fold residual.

mod additive;
mod spline;

pub use additive::{
    fold_labels, gam_fit, nlr_stack_fit, AdditiveModel, SearchConfig, Source, Term, TermLayout,
};
pub use spline::{BSplineBasis, SplineBasisConfig};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, dot, Matrix};
use crate::model::{Dataset, Inputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackWeights {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Weights lie on the probability simplex.
    pub constrained: bool,
}

impl StackWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0 / k as f64; k],
            intercept: 0.0,
            constrained: true,
        }
    }

    pub fn predict_row(&self, base: &[f64]) -> f64 {
        self.intercept + dot(&self.weights, base)
    }

    pub fn predict(&self, inputs: &Inputs) -> Vec<f64> {
        (0..inputs.len())
            .map(|i| self.predict_row(inputs.base_predictions.row(i)))
            .collect()
    }
}

/// Independent Gaussians per query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GaussianPredictive {
    pub fn homoscedastic(mean: Vec<f64>, sd: f64) -> Self {
        let sd = vec![sd; mean.len()];
        Self { mean, sd }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Per-point `p`-quantile; a zero sd collapses to the mean.
    pub fn quantile(&self, p: f64) -> Vec<f64> {
        let z = Normal::standard().inverse_cdf(p.clamp(0.0, 1.0));
        self.mean
            .iter()
            .zip(&self.sd)
            .map(|(&m, &s)| if s > 0.0 { m + s * z } else { m })
            .collect()
    }

    pub fn central_interval(&self, p: f64) -> (Vec<f64>, Vec<f64>) {
        let tail = 0.5 * (1.0 - p);
        (self.quantile(tail), self.quantile(1.0 - tail))
    }
}

pub fn avg_predict(base: &[f64]) -> f64 {
    assert!(!base.is_empty(), "avg of zero base models");
    base.iter().sum::<f64>() / base.len() as f64
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn squared_error(f: &Matrix<f64>, y: &[f64], w: &[f64]) -> f64 {
    f.matvec(w).iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn top_eigenvalue(a: &Matrix<f64>) -> f64 {
    let n = a.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 1e-3).collect();
    let mut lambda = 0.0;
    for _ in 0..200 {
        let av = a.matvec(&v);
        let norm = dot(&av, &av).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = dot(&v, &av) / dot(&v, &v);
        v = av.iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Minimizes `|y - F w|^2` over the simplex by projected gradient descent
/// from the uniform point, stopping once an iteration improves the objective
/// by less than `1e-8`.
///
/// The base models are fixed functions trained elsewhere, so their
/// out-of-fold predictions equal their plain predictions; `n_folds` is
/// validated for interface parity with the other stacking methods.
pub fn cv_stack_fit(data: &Dataset, n_folds: usize) -> Result<StackWeights> {
    let k = data.inputs.n_models();
    if k == 0 {
        return Err(Error::invalid("cv-stack needs at least one base model"));
    }
    if n_folds < 2 || data.len() < n_folds {
        return Err(Error::invalid(format!(
            "cv-stack needs n >= n_folds >= 2, got n = {}, n_folds = {n_folds}",
            data.len()
        )));
    }
    let f = data.base_predictions();
    let y = &data.targets;
    let ft = f.transpose();
    let gram = ft.matmul(f);
    let fty = ft.matvec(y);
    let lip = 2.0 * top_eigenvalue(&gram) * 1.01 + 1e-300;

    let mut w = vec![1.0 / k as f64; k];
    let mut obj = squared_error(f, y, &w);
    for _ in 0..200_000 {
        let gw = gram.matvec(&w);
        let step: Vec<f64> = (0..k).map(|j| w[j] - 2.0 * (gw[j] - fty[j]) / lip).collect();
        let next = project_simplex(&step);
        let next_obj = squared_error(f, y, &next);
        if next_obj > obj {
            break;
        }
        let gain = obj - next_obj;
        w = next;
        obj = next_obj;
        if gain < 1e-8 {
            break;
        }
    }
    Ok(StackWeights {
        weights: w,
        intercept: 0.0,
        constrained: true,
    })
}

/// Least squares with intercept on the base predictions.
fn ols(data: &Dataset, rows: &[usize]) -> Result<StackWeights> {
    let k = data.inputs.n_models();
    let f = data.base_predictions();
    let mut a = Matrix::zeros(k + 1, k + 1);
    let mut b = vec![0.0; k + 1];
    let mut r = vec![1.0; k + 1];
    for &i in rows {
        r[1..].copy_from_slice(f.row(i));
        for p in 0..=k {
            b[p] += r[p] * data.targets[i];
            for q in 0..=k {
                a[(p, q)] += r[p] * r[q];
            }
        }
    }
    let scale = a.diagonal().iter().cloned().fold(0.0, f64::max);
    a.add_diagonal(additive::NORMAL_RIDGE);
    let l = a.cholesky()?;
    let min_pivot = l.diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-10 * scale.max(1.0) {
        log::warn!("lnr-stack: base-prediction columns are (nearly) collinear; the ridge term resolves the fit");
    }
    let beta = cholesky_solve(&l, &b);
    Ok(StackWeights {
        weights: beta[1..].to_vec(),
        intercept: beta[0],
        constrained: false,
    })
}

/// Ordinary least squares stack with intercept; returns the weights and the
/// 5-fold out-of-fold residual sd.
pub fn lnr_stack_fit(data: &Dataset) -> Result<(StackWeights, f64)> {
    lnr_stack_fit_folds(data, 5)
}

pub fn lnr_stack_fit_folds(data: &Dataset, n_folds: usize) -> Result<(StackWeights, f64)> {
    let n = data.len();
    let k = data.inputs.n_models();
    if n <= k + 1 {
        return Err(Error::invalid(format!("lnr-stack needs n > K + 1, got n = {n}, K = {k}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let fit = ols(data, &all)?;
    let n_folds = n_folds.min(n).max(2);
    let labels = fold_labels(n, n_folds);
    let mut sse = 0.0;
    for fold in 0..n_folds {
        let train: Vec<usize> = all.iter().copied().filter(|&i| labels[i] != fold).collect();
        let w = ols(data, &train)?;
        for i in all.iter().copied().filter(|&i| labels[i] == fold) {
            sse += (data.targets[i] - w.predict_row(data.base_predictions().row(i))).powi(2);
        }
    }
    Ok((fit, (sse / n as f64).sqrt()))
}
