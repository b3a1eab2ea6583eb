//! Sample-based proper scoring: the energy form of the CRPS, a numerical
//! Cramér–von Mises integral used to cross-check it, and empirical quantiles.

use std::cmp::Ordering;

use statrs::function::erf::erf;

use crate::scalar::Scalar;

fn sorted<T: Scalar>(samples: &[T]) -> Vec<T> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    s
}

/// Sum over all ordered pairs `|s_i - s_j|` in `O(S log S)`.
fn pair_abs_sum<T: Scalar>(sorted: &[T]) -> T {
    let n = sorted.len();
    let two = T::lit(2.0);
    sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| (two * T::lit(k as f64) - T::lit((n - 1) as f64)) * x)
        .sum::<T>()
        * two
}

/// `mean |s - y| - 1/2 mean_{i,j} |s_i - s_j|` over all `S^2` ordered pairs.
///
/// This equals the Cramér–von Mises integral of the empirical CDF of the
/// samples against the step at `y_obs`, hence it is never negative.
pub fn crps_energy_estimate<T: Scalar>(samples: &[T], y_obs: T) -> T {
    assert!(samples.len() >= 2, "CRPS estimate needs at least two samples");
    let s = sorted(samples);
    let n = T::lit(s.len() as f64);
    let abs_obs: T = s.iter().map(|&x| (x - y_obs).abs()).sum::<T>() / n;
    let pairs = pair_abs_sum(&s) / (n * n);
    (abs_obs - T::lit(0.5) * pairs).max(T::zero())
}

/// Same as [`crps_energy_estimate`] but with the pair term averaged over the
/// `S (S - 1)` distinct pairs, which makes it unbiased for the CRPS of the
/// sampling distribution (and occasionally slightly negative).
pub fn crps_energy_unbiased<T: Scalar>(samples: &[T], y_obs: T) -> T {
    assert!(samples.len() >= 2, "CRPS estimate needs at least two samples");
    let s = sorted(samples);
    let n = s.len() as f64;
    let abs_obs: T = s.iter().map(|&x| (x - y_obs).abs()).sum::<T>() / T::lit(n);
    let pairs = pair_abs_sum(&s) / T::lit(n * (n - 1.0));
    abs_obs - T::lit(0.5) * pairs
}

/// Evenly spaced trapezoid grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationGrid<T> {
    pub lo: T,
    pub hi: T,
    pub points: usize,
}

impl<T: Scalar> IntegrationGrid<T> {
    /// Grid covering the samples and the observation, widened by `margin` on both sides.
    pub fn spanning(samples: &[T], y_obs: T, margin: T, points: usize) -> Self {
        let lo = samples.iter().copied().fold(y_obs, T::min) - margin;
        let hi = samples.iter().copied().fold(y_obs, T::max) + margin;
        Self {
            lo,
            hi,
            points: points.max(2),
        }
    }
}

/// Trapezoid-rule value of `int (F(t) - 1{y_obs < t})^2 dt` with `F` the
/// empirical CDF `P(Y < t)` of `pred_samples`.
pub fn cvm_numeric<T: Scalar>(pred_samples: &[T], y_obs: T, grid: IntegrationGrid<T>) -> T {
    let s = sorted(pred_samples);
    let n = T::lit(s.len() as f64);
    let h = (grid.hi - grid.lo) / T::lit((grid.points - 1) as f64);
    let mut below = 0usize;
    let mut total = T::zero();
    let mut prev = T::zero();
    for k in 0..grid.points {
        let t = grid.lo + h * T::lit(k as f64);
        while below < s.len() && s[below] < t {
            below += 1;
        }
        let cdf = T::lit(below as f64) / n;
        let step = if y_obs < t { T::one() } else { T::zero() };
        let v = (cdf - step) * (cdf - step);
        if k > 0 {
            total = total + (prev + v) * h / T::lit(2.0);
        }
        prev = v;
    }
    total
}

/// Closed-form CRPS of `N(mu, sd^2)` at `y`.
pub fn gaussian_crps(mu: f64, sd: f64, y: f64) -> f64 {
    if sd <= 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sd;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

/// Empirical quantile with linear interpolation between order statistics
/// (the `(n - 1) p` rule). `sorted` must be ascending.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: T) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    let pos = p.max(T::zero()).min(T::one()) * T::lit((n - 1) as f64);
    let lo = pos.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = pos - T::lit(lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn quantile<T: Scalar>(samples: &[T], p: T) -> T {
    quantile_sorted(&sorted(samples), p)
}
