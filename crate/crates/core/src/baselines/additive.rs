use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spline::BSplineBasis;
use super::GaussianPredictive;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, dot, Matrix};
use crate::model::{Dataset, Inputs};
use crate::rng::substream;

/// Column of the inputs a term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Base(usize),
    Feature(usize),
}

impl Source {
    fn values(self, inputs: &Inputs) -> Vec<f64> {
        match self {
            Source::Base(k) => inputs.base_predictions.col(k),
            Source::Feature(j) => inputs.features.col(j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Linear(Source),
    Spline(Source, BSplineBasis),
}

impl Term {
    fn width(&self) -> usize {
        match self {
            Term::Linear(_) => 1,
            Term::Spline(_, b) => b.len() - 1,
        }
    }
}

/// Layout of an additive model before the penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermLayout {
    Linear(Source),
    Spline(Source),
}

/// Intercept plus a sum of linear and penalized spline terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub terms: Vec<Term>,
    pub intercept: f64,
    /// Coefficients of all terms, concatenated in term order.
    pub coefficients: Vec<f64>,
    pub penalty: f64,
    /// Sd of out-of-fold residuals at the chosen hyperparameters.
    pub noise_sd: f64,
}

/// Random search over `(n_knots, penalty)` scored by k-fold CV error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: usize,
    pub n_folds: usize,
    pub degree: usize,
    pub min_knots: usize,
    pub max_knots: usize,
    /// `log10` bounds of the roughness penalty.
    pub log10_penalty: (f64, f64),
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 1000,
            n_folds: 5,
            degree: 3,
            min_knots: 2,
            max_knots: 10,
            log10_penalty: (-4.0, 4.0),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("search budget must be >= 1"));
        }
        if self.n_folds < 2 {
            return Err(Error::invalid("n_folds must be >= 2"));
        }
        if self.min_knots < 2 || self.max_knots < self.min_knots {
            return Err(Error::invalid("knot range must satisfy 2 <= min_knots <= max_knots"));
        }
        let (a, b) = self.log10_penalty;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::invalid("log10_penalty must be a finite, ordered pair"));
        }
        Ok(())
    }
}

/// `i mod n_folds` fold labels.
pub fn fold_labels(n: usize, n_folds: usize) -> Vec<usize> {
    (0..n).map(|i| i % n_folds).collect()
}

fn build_terms(layout: &[TermLayout], inputs: &Inputs, n_knots: usize, degree: usize) -> Result<Vec<Term>> {
    layout
        .iter()
        .map(|l| {
            Ok(match *l {
                TermLayout::Linear(s) => Term::Linear(s),
                TermLayout::Spline(s) => Term::Spline(s, BSplineBasis::from_quantiles(&s.values(inputs), n_knots, degree)?),
            })
        })
        .collect()
}

/// Design with a leading intercept column. Spline terms drop their first
/// basis function: the basis sums to one, so the intercept already spans it.
fn design(terms: &[Term], inputs: &Inputs) -> Matrix<f64> {
    let n = inputs.len();
    let width = 1 + terms.iter().map(Term::width).sum::<usize>();
    let mut x = Matrix::zeros(n, width);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    let mut col = 1;
    for t in terms {
        match t {
            Term::Linear(s) => {
                for (i, v) in s.values(inputs).into_iter().enumerate() {
                    x[(i, col)] = v;
                }
            }
            Term::Spline(s, b) => {
                for (i, v) in s.values(inputs).into_iter().enumerate() {
                    for (j, bj) in b.eval(v).into_iter().skip(1).enumerate() {
                        x[(i, col + j)] = bj;
                    }
                }
            }
        }
        col += t.width();
    }
    x
}

fn penalty_matrix(terms: &[Term]) -> Matrix<f64> {
    let width = 1 + terms.iter().map(Term::width).sum::<usize>();
    let mut pen = Matrix::zeros(width, width);
    let mut col = 1;
    for t in terms {
        if let Term::Spline(_, b) = t {
            let p = b.penalty_matrix();
            for a in 1..b.len() {
                for c in 1..b.len() {
                    pen[(col + a - 1, col + c - 1)] = p[(a, c)];
                }
            }
        }
        col += t.width();
    }
    pen
}

/// Normal equations restricted to a row subset.
struct Gram {
    xtx: Matrix<f64>,
    xty: Vec<f64>,
}

impl Gram {
    fn new(x: &Matrix<f64>, y: &[f64], rows: impl Iterator<Item = usize> + Clone) -> Self {
        let p = x.cols();
        let mut xtx = Matrix::zeros(p, p);
        let mut xty = vec![0.0; p];
        for i in rows {
            let r = x.row(i);
            for a in 0..p {
                xty[a] += r[a] * y[i];
                for b in 0..=a {
                    xtx[(a, b)] += r[a] * r[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(b, a)] = xtx[(a, b)];
            }
        }
        Self { xtx, xty }
    }

    /// `(X^T X + lambda P + ridge I)^{-1} X^T y`.
    fn solve(&self, pen: &Matrix<f64>, lambda: f64, ridge: f64) -> Result<Vec<f64>> {
        let p = self.xty.len();
        let mut a = self.xtx.clone();
        for i in 0..p {
            for j in 0..p {
                a[(i, j)] += lambda * pen[(i, j)];
            }
        }
        a.add_diagonal(ridge);
        Ok(cholesky_solve(&a.cholesky()?, &self.xty))
    }
}

/// Ridge on the normal equations, for rank safety.
pub(crate) const NORMAL_RIDGE: f64 = 1e-8;

struct CvSetup {
    x: Matrix<f64>,
    full: Gram,
    folds: Vec<(Gram, Vec<usize>)>,
    pen: Matrix<f64>,
}

impl CvSetup {
    fn new(terms: &[Term], data: &Dataset, n_folds: usize) -> Self {
        let x = design(terms, &data.inputs);
        let y = &data.targets;
        let labels = fold_labels(data.len(), n_folds);
        let folds = (0..n_folds)
            .map(|f| {
                let train = (0..data.len()).filter(|&i| labels[i] != f);
                let test: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == f).collect();
                (Gram::new(&x, y, train), test)
            })
            .collect();
        Self {
            full: Gram::new(&x, y, 0..data.len()),
            pen: penalty_matrix(terms),
            x,
            folds,
        }
    }

    fn cv_mse(&self, y: &[f64], lambda: f64) -> Result<f64> {
        let mut sse = 0.0;
        for (gram, test) in &self.folds {
            let beta = gram.solve(&self.pen, lambda, NORMAL_RIDGE)?;
            for &i in test {
                sse += (y[i] - dot(self.x.row(i), &beta)).powi(2);
            }
        }
        Ok(sse / y.len() as f64)
    }
}

impl AdditiveModel {
    /// Fits with fixed hyperparameters; `noise_sd` is the CV residual sd.
    pub fn fit_fixed(
        layout: &[TermLayout],
        data: &Dataset,
        n_knots: usize,
        degree: usize,
        penalty: f64,
        n_folds: usize,
    ) -> Result<Self> {
        let terms = build_terms(layout, &data.inputs, n_knots, degree)?;
        let setup = CvSetup::new(&terms, data, n_folds);
        let mse = setup.cv_mse(&data.targets, penalty)?;
        Self::finish(terms, &setup, penalty, mse)
    }

    fn finish(terms: Vec<Term>, setup: &CvSetup, penalty: f64, cv_mse: f64) -> Result<Self> {
        let beta = setup.full.solve(&setup.pen, penalty, NORMAL_RIDGE)?;
        Ok(Self {
            terms,
            intercept: beta[0],
            coefficients: beta[1..].to_vec(),
            penalty,
            noise_sd: cv_mse.sqrt(),
        })
    }

    /// Random search over `(n_knots, penalty)`, keeping the lowest CV error.
    /// Ties keep the earlier candidate.
    pub fn fit_search(layout: &[TermLayout], data: &Dataset, cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        if data.len() < cfg.n_folds {
            return Err(Error::invalid(format!(
                "{} rows cannot be split into {} folds",
                data.len(),
                cfg.n_folds
            )));
        }
        let mut rng = substream(cfg.seed, 0);
        let (lo, hi) = cfg.log10_penalty;
        let candidates: Vec<(usize, f64)> = (0..cfg.budget)
            .map(|_| {
                let k = rng.gen_range(cfg.min_knots..=cfg.max_knots);
                let u: f64 = rng.gen();
                (k, 10f64.powf(lo + (hi - lo) * u))
            })
            .collect();

        let has_spline = layout.iter().any(|l| matches!(l, TermLayout::Spline(_)));
        let knot_options: Vec<usize> = if has_spline {
            (cfg.min_knots..=cfg.max_knots).collect()
        } else {
            vec![cfg.min_knots]
        };
        let mut best: Option<(f64, usize, f64)> = None;
        for &k in &knot_options {
            let terms = build_terms(layout, &data.inputs, k, cfg.degree)?;
            let setup = CvSetup::new(&terms, data, cfg.n_folds);
            for (idx, &(ck, lambda)) in candidates.iter().enumerate() {
                if has_spline && ck != k {
                    continue;
                }
                // a numerically singular candidate is skipped, not fatal
                let mse = setup.cv_mse(&data.targets, lambda).unwrap_or(f64::INFINITY);
                let better = match best {
                    None => true,
                    Some((b, bidx, _)) => mse < b || (mse == b && idx < bidx),
                };
                if better && mse.is_finite() {
                    best = Some((mse, idx, lambda));
                }
            }
        }
        let (mse, idx, lambda) = best.ok_or_else(|| Error::NonFiniteDensity("spline cross-validation".into()))?;
        let terms = build_terms(layout, &data.inputs, candidates[idx].0, cfg.degree)?;
        let setup = CvSetup::new(&terms, data, cfg.n_folds);
        Self::finish(terms, &setup, lambda, mse)
    }

    pub fn n_knots(&self) -> Option<usize> {
        self.terms.iter().find_map(|t| match t {
            Term::Spline(_, b) => Some(b.len() + 1 - b.degree()),
            Term::Linear(_) => None,
        })
    }

    pub fn predict_mean(&self, inputs: &Inputs) -> Vec<f64> {
        let x = design(&self.terms, inputs);
        (0..inputs.len())
            .map(|i| self.intercept + dot(&x.row(i)[1..], &self.coefficients))
            .collect()
    }

    pub fn predict(&self, inputs: &Inputs) -> GaussianPredictive {
        GaussianPredictive::homoscedastic(self.predict_mean(inputs), self.noise_sd)
    }

    /// Contribution of term `t` at the inputs, without the intercept.
    pub fn term_values(&self, t: usize, inputs: &Inputs) -> Vec<f64> {
        let start: usize = self.terms[..t].iter().map(Term::width).sum();
        let width = self.terms[t].width();
        let x = design(&self.terms[t..=t], inputs);
        let coef = &self.coefficients[start..start + width];
        (0..inputs.len()).map(|i| dot(&x.row(i)[1..], coef)).collect()
    }
}

/// `y ~ a + sum_k s_k(f_k(x))` with penalized B-splines of each base prediction.
pub fn nlr_stack_fit(data: &Dataset, search: &SearchConfig) -> Result<AdditiveModel> {
    if data.len() < 10 {
        return Err(Error::invalid("nlr-stack needs at least 10 rows"));
    }
    let layout: Vec<TermLayout> = (0..data.inputs.n_models())
        .map(|k| TermLayout::Spline(Source::Base(k)))
        .collect();
    AdditiveModel::fit_search(&layout, data, search)
}

/// `y ~ a + sum_k b_k f_k(x) + s(x)` with a penalized spline in the single feature.
pub fn gam_fit(data: &Dataset, search: &SearchConfig) -> Result<AdditiveModel> {
    if data.len() < 10 {
        return Err(Error::invalid("gam needs at least 10 rows"));
    }
    if data.features().cols() != 1 {
        return Err(Error::invalid(format!(
            "gam supports exactly one feature column, got {}",
            data.features().cols()
        )));
    }
    let mut layout: Vec<TermLayout> = (0..data.inputs.n_models())
        .map(|k| TermLayout::Linear(Source::Base(k)))
        .collect();
    layout.push(TermLayout::Spline(Source::Feature(0)));
    AdditiveModel::fit_search(&layout, data, search)
}
