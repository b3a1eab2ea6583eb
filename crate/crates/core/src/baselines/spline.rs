use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scoring::quantile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineBasisConfig {
    pub degree: usize,
    /// Distinct knots including both boundaries, placed at data quantiles.
    pub n_knots: usize,
    pub penalty: f64,
}

impl Default for SplineBasisConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            n_knots: 6,
            penalty: 1.0,
        }
    }
}

impl SplineBasisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_knots < 2 {
            return Err(Error::invalid(format!("n_knots must be >= 2, got {}", self.n_knots)));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::invalid(format!("penalty must be finite and >= 0, got {}", self.penalty)));
        }
        Ok(())
    }
}

/// Clamped B-spline basis on `[lo, hi]`, extended linearly outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Knots at evenly spaced quantiles of `values`; duplicates are merged.
    pub fn from_quantiles(values: &[f64], n_knots: usize, degree: usize) -> Result<Self> {
        if n_knots < 2 {
            return Err(Error::invalid(format!("n_knots must be >= 2, got {n_knots}")));
        }
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("spline basis needs finite values"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut breaks: Vec<f64> = (0..n_knots)
            .map(|j| quantile_sorted(&sorted, j as f64 / (n_knots - 1) as f64))
            .collect();
        breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
        if breaks.len() < 2 {
            let c = breaks[0];
            breaks = vec![c - 0.5, c + 0.5];
        }
        Self::from_breaks(&breaks, degree)
    }

    /// Strictly increasing breakpoints, boundaries included.
    pub fn from_breaks(breaks: &[f64], degree: usize) -> Result<Self> {
        if breaks.len() < 2 || breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("spline breakpoints must be strictly increasing"));
        }
        let (lo, hi) = (breaks[0], breaks[breaks.len() - 1]);
        let mut knots = vec![lo; degree];
        knots.extend_from_slice(breaks);
        knots.extend(std::iter::repeat(hi).take(degree));
        Ok(Self { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    fn span(&self, x: f64) -> usize {
        let last = self.knots.len() - self.degree - 2;
        let mut s = self.degree;
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// All basis functions of degree `p` (`p <= degree`) at `x` in `[lo, hi]`.
    fn values_of_degree(&self, x: f64, p: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut b = vec![0.0; t.len() - 1];
        b[self.span(x)] = 1.0;
        for q in 1..=p {
            for j in 0..t.len() - q - 1 {
                let left = if t[j + q] > t[j] {
                    (x - t[j]) / (t[j + q] - t[j]) * b[j]
                } else {
                    0.0
                };
                let right = if t[j + q + 1] > t[j + 1] {
                    (t[j + q + 1] - x) / (t[j + q + 1] - t[j + 1]) * b[j + 1]
                } else {
                    0.0
                };
                b[j] = left + right;
            }
        }
        b.truncate(t.len() - p - 1);
        b
    }

    fn derivatives(&self, x: f64) -> Vec<f64> {
        let p = self.degree;
        if p == 0 {
            return vec![0.0; self.len()];
        }
        let t = &self.knots;
        let lower = self.values_of_degree(x, p - 1);
        (0..self.len())
            .map(|j| {
                let a = if t[j + p] > t[j] { lower[j] / (t[j + p] - t[j]) } else { 0.0 };
                let b = if t[j + p + 1] > t[j + 1] {
                    lower[j + 1] / (t[j + p + 1] - t[j + 1])
                } else {
                    0.0
                };
                p as f64 * (a - b)
            })
            .collect()
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.range();
        let edge = x.clamp(lo, hi);
        let mut b = self.values_of_degree(edge, self.degree);
        if edge != x {
            let d = self.derivatives(edge);
            for (bj, dj) in b.iter_mut().zip(d) {
                *bj += dj * (x - edge);
            }
        }
        b
    }

    pub fn design(&self, x: &[f64]) -> Matrix<f64> {
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| self.eval(v)).collect();
        Matrix::from_fn(x.len(), self.len(), |i, j| rows[i][j])
    }

    /// Knot averages; a spline whose coefficients equal these is the identity.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.len())
            .map(|j| {
                if p == 0 {
                    0.5 * (self.knots[j] + self.knots[j + 1])
                } else {
                    self.knots[j + 1..=j + p].iter().sum::<f64>() / p as f64
                }
            })
            .collect()
    }

    /// `D^T D` for second divided differences of the coefficients over the
    /// Greville abscissae rescaled to `[0, 1]`. Its null space is exactly the
    /// set of splines that are linear in `x`.
    pub fn penalty_matrix(&self) -> Matrix<f64> {
        let n = self.len();
        let mut pen = Matrix::zeros(n, n);
        if n < 3 {
            return pen;
        }
        let (lo, hi) = self.range();
        let g: Vec<f64> = self.greville().iter().map(|v| (v - lo) / (hi - lo)).collect();
        for j in 1..n - 1 {
            let (h0, h1) = (g[j] - g[j - 1], g[j + 1] - g[j]);
            let row = [(j - 1, 1.0 / h0), (j, -1.0 / h0 - 1.0 / h1), (j + 1, 1.0 / h1)];
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    pen[(a, b)] += va * vb;
                }
            }
        }
        pen
    }
}
