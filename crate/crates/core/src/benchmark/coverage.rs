use serde::{Deserialize, Serialize};

use crate::baselines::GaussianPredictive;
use crate::error::{Error, Result};
use crate::model::PredictiveDistribution;

/// Anything that yields central predictive intervals per query point.
pub trait IntervalForecast {
    fn central_interval(&self, p: f64) -> (Vec<f64>, Vec<f64>);
}

impl IntervalForecast for PredictiveDistribution {
    fn central_interval(&self, p: f64) -> (Vec<f64>, Vec<f64>) {
        PredictiveDistribution::central_interval(self, p)
    }
}

impl IntervalForecast for GaussianPredictive {
    fn central_interval(&self, p: f64) -> (Vec<f64>, Vec<f64>) {
        GaussianPredictive::central_interval(self, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub nominal: Vec<f64>,
    pub empirical: Vec<f64>,
    pub mean_abs_gap: f64,
}

impl CoverageCurve {
    fn from_parts(nominal: Vec<f64>, empirical: Vec<f64>) -> Self {
        let mean_abs_gap = nominal
            .iter()
            .zip(&empirical)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / nominal.len() as f64;
        Self {
            nominal,
            empirical,
            mean_abs_gap,
        }
    }

    /// Pointwise mean of curves on a shared grid; the gap is the mean of the
    /// individual gaps, not the gap of the averaged curve.
    pub fn average(curves: &[CoverageCurve]) -> Option<CoverageCurve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let empirical = (0..first.nominal.len())
            .map(|j| curves.iter().map(|c| c.empirical[j]).sum::<f64>() / n)
            .collect();
        let gap = curves.iter().map(|c| c.mean_abs_gap).sum::<f64>() / n;
        Some(CoverageCurve {
            nominal: first.nominal.clone(),
            empirical,
            mean_abs_gap: gap,
        })
    }
}

/// `0.05, 0.10, ..., 0.95, 0.99`.
pub fn nominal_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..=19).map(|j| j as f64 * 0.05).collect();
    g.push(0.99);
    g
}

/// Fraction of `truth` inside each central `p` interval.
pub fn coverage_curve<F: IntervalForecast + ?Sized>(pred: &F, truth: &[f64], nominal: &[f64]) -> Result<CoverageCurve> {
    if nominal.is_empty() || nominal.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::invalid("nominal levels must lie in (0, 1]"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("coverage needs at least one target"));
    }
    let empirical = nominal
        .iter()
        .map(|&p| {
            let (lo, hi) = pred.central_interval(p);
            if lo.len() != truth.len() {
                return Err(Error::invalid(format!(
                    "{} intervals for {} targets",
                    lo.len(),
                    truth.len()
                )));
            }
            let inside = truth
                .iter()
                .zip(lo.iter().zip(&hi))
                .filter(|(t, (l, h))| *l <= *t && *t <= *h)
                .count();
            Ok(inside as f64 / truth.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageCurve::from_parts(nominal.to_vec(), empirical))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_width_intervals_cover_nothing() {
        let g = GaussianPredictive::homoscedastic(vec![0.0; 4], 0.0);
        let c = coverage_curve(&g, &[0.1, -0.2, 0.3, 1.0], &nominal_grid()).unwrap();
        assert!(c.empirical.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn grid_shape() {
        let g = nominal_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[18] - 0.95).abs() < 1e-12 && g[19] == 0.99);
    }

    #[test]
    fn rejects_bad_levels() {
        let g = GaussianPredictive::homoscedastic(vec![0.0], 1.0);
        assert!(coverage_curve(&g, &[0.0], &[0.0]).is_err());
        assert!(coverage_curve(&g, &[0.0], &[1.5]).is_err());
    }
}
