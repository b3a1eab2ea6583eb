//! The generative ensemble model: data containers, priors, the joint log
//! density of a latent configuration, and Monte-Carlo prediction from a
//! fitted variational state.
//!
//! ```text
//! y_i ~ N(f(x_i), sigma^2),   f(x) = sum_k fhat_k(x) mu_k(x) + eps(x)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cross_kernel, KernelConfig};
use crate::linalg::{mvn_log_density, Matrix};
use crate::rng::{std_normal, substream};
use crate::scoring::quantile_sorted;
use crate::tailfree::{ModelTree, NodeGpValues, TemperatureSet};
use crate::vi::{Draw, LatentSampler, VariationalState};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Features and base-model predictions at a set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    /// `n x d`
    pub features: Matrix<f64>,
    /// `n x K`, column `k` holds `fhat_k(x_i)`.
    pub base_predictions: Matrix<f64>,
}

impl Inputs {
    pub fn new(features: Matrix<f64>, base_predictions: Matrix<f64>) -> Result<Self> {
        if features.rows() != base_predictions.rows() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} base-prediction rows",
                features.rows(),
                base_predictions.rows()
            )));
        }
        if !features.is_finite() || !base_predictions.is_finite() {
            return Err(Error::invalid("inputs contain non-finite values"));
        }
        Ok(Self {
            features,
            base_predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_models(&self) -> usize {
        self.base_predictions.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            base_predictions: self.base_predictions.select_rows(idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Inputs,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix<f64>, targets: Vec<f64>, base_predictions: Matrix<f64>) -> Result<Self> {
        let inputs = Inputs::new(features, base_predictions)?;
        if targets.len() != inputs.len() {
            return Err(Error::invalid(format!(
                "{} targets for {} rows",
                targets.len(),
                inputs.len()
            )));
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::invalid("targets contain non-finite values"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn features(&self) -> &Matrix<f64> {
        &self.inputs.features
    }

    pub fn base_predictions(&self) -> &Matrix<f64> {
        &self.inputs.base_predictions
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Affine map between raw target units and the unit-scale space the model is
/// fit in. Targets and base predictions share the map, so convex weights are
/// unaffected by it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: f64,
    pub scale: f64,
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn from_targets(y: &[f64]) -> Self {
        if y.len() < 2 {
            return Self::identity();
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Self {
            shift: mean,
            scale: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }

    pub fn inputs(&self, inputs: &Inputs) -> Inputs {
        let mut out = inputs.clone();
        for v in out.base_predictions.as_mut_slice() {
            *v = self.forward(*v);
        }
        out
    }

    pub fn dataset(&self, data: &Dataset) -> Dataset {
        Dataset {
            inputs: self.inputs(&data.inputs),
            targets: data.targets.iter().map(|&y| self.forward(y)).collect(),
        }
    }
}

/// Log-normal distribution: `ln X ~ N(mu, sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sd: f64,
}

impl LogNormal {
    pub fn new(mu: f64, sd: f64) -> Result<Self> {
        let d = Self { mu, sd };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0) || !self.sd.is_finite() || !self.mu.is_finite() {
            return Err(Error::invalid(format!(
                "log-normal needs finite mu and positive sd, got ({}, {})",
                self.mu, self.sd
            )));
        }
        Ok(())
    }

    pub fn median(&self) -> f64 {
        self.mu.exp()
    }

    /// Density of `ln x` under `N(mu, sd^2)`.
    pub fn log_density_of_log(&self, t: f64) -> f64 {
        let z = (t - self.mu) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * LN_2PI
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.log_density_of_log(x.ln()) - x.ln()
    }
}

/// A positive hyperparameter that is either pinned or latent with a
/// log-normal prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyper {
    Fixed(f64),
    LogNormal { mu: f64, sd: f64 },
}

impl Hyper {
    pub fn validate(&self, what: &str) -> Result<()> {
        match *self {
            Hyper::Fixed(v) if v > 0.0 && v.is_finite() => Ok(()),
            Hyper::Fixed(v) => Err(Error::invalid(format!("fixed {what} must be positive, got {v}"))),
            Hyper::LogNormal { mu, sd } => LogNormal::new(mu, sd)
                .map(|_| ())
                .map_err(|e| Error::invalid(format!("{what}: {e}"))),
        }
    }

    pub fn prior(&self) -> Option<LogNormal> {
        match *self {
            Hyper::Fixed(_) => None,
            Hyper::LogNormal { mu, sd } => Some(LogNormal { mu, sd }),
        }
    }

    pub fn fixed(&self) -> Option<f64> {
        match *self {
            Hyper::Fixed(v) => Some(v),
            Hyper::LogNormal { .. } => None,
        }
    }

    /// Fixed value or prior median.
    pub fn center(&self) -> f64 {
        match *self {
            Hyper::Fixed(v) => v,
            Hyper::LogNormal { mu, .. } => mu.exp(),
        }
    }
}

/// Priors and structural settings of the ensemble. Values apply on the
/// standardized target scale when `standardize` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Kernel of the weight GPs; its lengthscale is used when
    /// `weight_lengthscale` is fixed.
    pub weight_kernel: KernelConfig<f64>,
    pub residual_kernel: KernelConfig<f64>,
    pub weight_lengthscale: Hyper,
    pub residual_lengthscale: Hyper,
    pub temperature: Hyper,
    pub noise_sd: Hyper,
    /// One temperature shared by every internal node.
    pub tie_temperatures: bool,
    /// Include the residual process.
    pub residual: bool,
    pub standardize: bool,
    /// Upper bound on inducing points per GP.
    pub max_inducing: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            weight_kernel: KernelConfig {
                lengthscale: (-1.0f64).exp(),
                amplitude: 1.0,
                jitter: 1e-6,
            },
            residual_kernel: KernelConfig {
                lengthscale: (-1.0f64).exp(),
                amplitude: 0.1,
                jitter: 1e-6,
            },
            weight_lengthscale: Hyper::LogNormal { mu: -1.0, sd: 1.0 },
            residual_lengthscale: Hyper::LogNormal { mu: -1.0, sd: 1.0 },
            temperature: Hyper::LogNormal { mu: 0.0, sd: 1.0 },
            noise_sd: Hyper::LogNormal { mu: -2.0, sd: 1.0 },
            tie_temperatures: false,
            residual: true,
            standardize: true,
            max_inducing: 20,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        self.weight_kernel.validate()?;
        self.residual_kernel.validate()?;
        self.weight_lengthscale.validate("weight_lengthscale")?;
        self.residual_lengthscale.validate("residual_lengthscale")?;
        self.temperature.validate("temperature")?;
        self.noise_sd.validate("noise_sd")?;
        if self.max_inducing == 0 {
            return Err(Error::invalid("max_inducing must be at least 1"));
        }
        Ok(())
    }
}

/// One configuration of every latent variable, evaluated at the data points.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub node_gps: NodeGpValues<f64>,
    pub residual: Vec<f64>,
    pub temps: TemperatureSet<f64>,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub tree: ModelTree,
    pub priors: PriorConfig,
}

impl EnsembleModel {
    pub fn new(tree: ModelTree, priors: PriorConfig) -> Result<Self> {
        priors.validate()?;
        Ok(Self { tree, priors })
    }

    fn check(&self, data: &Dataset, state: &LatentState) -> Result<()> {
        if data.base_predictions().cols() != self.tree.n_leaves() {
            return Err(Error::TreeMismatch(format!(
                "{} base-model columns for {} leaves",
                data.base_predictions().cols(),
                self.tree.n_leaves()
            )));
        }
        state.node_gps.check_covers(&self.tree, data.len())?;
        if state.residual.len() != data.len() {
            return Err(Error::invalid("residual length differs from the dataset"));
        }
        if state.temps.values.len() != self.tree.temperature_nodes().len() {
            return Err(Error::TreeMismatch("temperature count differs from the tree".into()));
        }
        if !(state.noise_sd > 0.0) || state.temps.values.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::invalid("noise sd and temperatures must be positive"));
        }
        Ok(())
    }

    fn weights_at(&self, state: &LatentState, i: usize) -> Vec<f64> {
        let slots: Vec<&Vec<f64>> = self
            .tree
            .gp_nodes()
            .iter()
            .map(|id| &state.node_gps.values[id])
            .collect();
        let mut scratch = vec![0.0; self.tree.nodes().len()];
        let mut w = vec![0.0; self.tree.n_leaves()];
        self.tree.weights_into(
            |slot| slots[slot][i],
            |slot| state.temps.values[slot],
            &mut scratch,
            &mut w,
        );
        w
    }

    /// `sum_k fhat_k(x_i) mu_k(x_i) + eps(x_i)`.
    pub fn ensemble_mean(&self, data: &Dataset, state: &LatentState, i: usize) -> Result<f64> {
        self.check(data, state)?;
        let w = self.weights_at(state, i);
        let base = data.base_predictions().row(i);
        Ok(w.iter().zip(base).map(|(a, b)| a * b).sum::<f64>() + state.residual[i])
    }

    pub fn log_likelihood(&self, data: &Dataset, state: &LatentState) -> Result<f64> {
        self.check(data, state)?;
        let s = state.noise_sd;
        let mut total = 0.0;
        for i in 0..data.len() {
            let w = self.weights_at(state, i);
            let f: f64 = w
                .iter()
                .zip(data.base_predictions().row(i))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + state.residual[i];
            let r = (data.targets[i] - f) / s;
            total += -0.5 * LN_2PI - s.ln() - 0.5 * r * r;
        }
        Ok(total)
    }

    /// `log p(y | f, sigma) + log p(G) + log p(eps) + log p(Lambda) + log p(sigma)`
    /// with the GP terms taken as the prior marginals at the data points.
    /// Pinned hyperparameters contribute nothing.
    pub fn joint_log_density(&self, data: &Dataset, state: &LatentState) -> Result<f64> {
        let ll = self.log_likelihood(data, state)?;
        let check = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteDensity(what.to_string()))
            }
        };
        let ll = check(ll, "likelihood")?;
        let mut total = ll;
        if !data.is_empty() {
            let x = data.features();
            let gp_term = |kernel: &KernelConfig<f64>, v: &[f64]| -> Result<f64> {
                let mut k = cross_kernel(x, x, kernel);
                k.add_diagonal(kernel.jitter);
                let l = k.cholesky()?;
                Ok(mvn_log_density(v, &vec![0.0; v.len()], &l))
            };
            for id in self.tree.gp_nodes() {
                total += check(gp_term(&self.priors.weight_kernel, &state.node_gps.values[id])?, "weight GP prior")?;
            }
            if self.priors.residual {
                total += check(gp_term(&self.priors.residual_kernel, &state.residual)?, "residual GP prior")?;
            }
        }
        if let Some(p) = self.priors.temperature.prior() {
            if self.priors.tie_temperatures {
                if let Some(&t) = state.temps.values.first() {
                    total += check(p.log_pdf(t), "temperature prior")?;
                }
            } else {
                for &t in &state.temps.values {
                    total += check(p.log_pdf(t), "temperature prior")?;
                }
            }
        }
        if let Some(p) = self.priors.noise_sd.prior() {
            total += check(p.log_pdf(state.noise_sd), "noise prior")?;
        }
        Ok(total)
    }
}

/// Monte-Carlo predictive law at a set of query points, in raw target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub query: Inputs,
    /// `S x m` joint draws.
    pub samples: Matrix<f64>,
    pub mean: Vec<f64>,
    pub total_sd: Vec<f64>,
    pub selection_sd: Vec<f64>,
    pub prediction_sd: Vec<f64>,
    /// `(p, values)` in increasing `p`.
    pub quantiles: Vec<(f64, Vec<f64>)>,
    /// `m x K` posterior-mean ensemble weights.
    pub mean_weights: Matrix<f64>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.rows()
    }

    /// Draws at query point `j`, sorted ascending.
    pub fn sorted_column(&self, j: usize) -> Vec<f64> {
        let mut c = self.samples.col(j);
        c.sort_by(f64::total_cmp);
        c
    }

    /// Empirical quantile at level `p` for every query point.
    pub fn quantile(&self, p: f64) -> Vec<f64> {
        (0..self.len())
            .map(|j| quantile_sorted(&self.sorted_column(j), p))
            .collect()
    }

    /// Central `p` interval `(lower, upper)` at every query point.
    pub fn central_interval(&self, p: f64) -> (Vec<f64>, Vec<f64>) {
        let lo = 0.5 * (1.0 - p);
        let hi = 1.0 - lo;
        (0..self.len())
            .map(|j| {
                let c = self.sorted_column(j);
                (quantile_sorted(&c, lo), quantile_sorted(&c, hi))
            })
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Add observation noise to the draws (intervals for `y` rather than `f`).
    pub include_noise: bool,
    pub quantiles: Vec<f64>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            include_noise: true,
            quantiles: vec![0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975],
        }
    }
}

fn sd_of(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
    var.sqrt()
}

/// Per-sample parts of a predictive draw at the query points, standardized units.
struct PredictiveSample {
    selection: Vec<f64>,
    prediction: Vec<f64>,
    weights: Vec<f64>,
}

fn predictive_sample(
    state: &VariationalState,
    sampler: &LatentSampler,
    query: &Inputs,
    include_noise: bool,
    s: u64,
    seed: u64,
) -> Result<PredictiveSample> {
    let mut rng = substream(seed, s);
    let draw: Draw = state.draw(&mut rng);
    let m = query.len();
    let k = state.tree.n_leaves();
    let lv = sampler.values(state, &draw, Some(&mut rng))?;
    let (g, eps) = (lv.g, lv.residual);
    let temps = &draw.temperatures;
    let mut scratch = vec![0.0; state.tree.nodes().len()];
    let mut weights = vec![0.0; m * k];
    let mut selection = vec![0.0; m];
    let mut prediction = vec![0.0; m];
    for j in 0..m {
        let w = &mut weights[j * k..(j + 1) * k];
        state
            .tree
            .weights_into(|slot| g[slot][j], |slot| temps[slot], &mut scratch, w);
        selection[j] = w
            .iter()
            .zip(query.base_predictions.row(j))
            .map(|(a, b)| a * b)
            .sum();
        let noise = if include_noise {
            draw.noise_sd * std_normal::<f64, _>(&mut rng)
        } else {
            0.0
        };
        prediction[j] = eps.as_ref().map_or(0.0, |e| e[j]) + noise;
    }
    Ok(PredictiveSample {
        selection,
        prediction,
        weights,
    })
}

/// Draws `n_samples` joint samples of every latent variable from `q`,
/// evaluates the ensemble at the query points and summarizes. Sample `s` is
/// generated from its own substream, so the result does not depend on
/// evaluation order.
pub fn predict(state: &VariationalState, query: &Inputs, opts: &PredictOptions) -> Result<PredictiveDistribution> {
    if opts.n_samples < 2 {
        return Err(Error::invalid("prediction needs at least two samples"));
    }
    if query.n_models() != state.tree.n_leaves() {
        return Err(Error::TreeMismatch(format!(
            "{} base-model columns for {} leaves",
            query.n_models(),
            state.tree.n_leaves()
        )));
    }
    let st = state.standardizer;
    let q = st.inputs(query);
    let m = q.len();
    let k = state.tree.n_leaves();
    let sn = opts.n_samples;
    let sampler = LatentSampler::new(state, &q.features)?;

    let mut sel = Matrix::zeros(sn, m);
    let mut pred = Matrix::zeros(sn, m);
    let mut wsum = vec![0.0; m * k];
    for s in 0..sn {
        let ps = predictive_sample(state, &sampler, &q, opts.include_noise, s as u64, opts.seed)?;
        sel.row_mut(s).copy_from_slice(&ps.selection);
        pred.row_mut(s).copy_from_slice(&ps.prediction);
        for (a, b) in wsum.iter_mut().zip(&ps.weights) {
            *a += b;
        }
    }

    let mut samples = Matrix::zeros(sn, m);
    for s in 0..sn {
        for j in 0..m {
            samples[(s, j)] = st.inverse(sel[(s, j)] + pred[(s, j)]);
        }
    }
    fn col(mat: &Matrix<f64>, j: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..mat.rows()).map(move |s| mat[(s, j)])
    }
    let mean = (0..m)
        .map(|j| col(&samples, j).sum::<f64>() / sn as f64)
        .collect();
    let total_sd = (0..m).map(|j| sd_of(col(&samples, j), sn)).collect();
    let selection_sd = (0..m).map(|j| st.scale * sd_of(col(&sel, j), sn)).collect();
    let prediction_sd = (0..m).map(|j| st.scale * sd_of(col(&pred, j), sn)).collect();
    let mean_weights = Matrix::from_row_major(
        m,
        k,
        wsum.into_iter().map(|w| w / sn as f64).collect(),
    )?;

    let mut levels = opts.quantiles.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let sorted_cols: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut c: Vec<f64> = col(&samples, j).collect();
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    let quantiles = levels
        .into_iter()
        .map(|p| (p, sorted_cols.iter().map(|c| quantile_sorted(c, p)).collect()))
        .collect();

    Ok(PredictiveDistribution {
        query: query.clone(),
        samples,
        mean,
        total_sd,
        selection_sd,
        prediction_sd,
        quantiles,
        mean_weights,
    })
}

/// Model-selection and prediction components of the predictive spread.
/// The selection part is the spread of `sum_k fhat_k mu_k` over draws of the
/// weight GPs and temperatures; the prediction part is the spread of
/// `eps + sigma z`, which does not depend on the weights.
pub fn decompose_uncertainty(
    state: &VariationalState,
    query: &Inputs,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = predict(
        state,
        query,
        &PredictOptions {
            n_samples,
            seed,
            include_noise: true,
            quantiles: vec![],
        },
    )?;
    Ok((p.selection_sd, p.prediction_sd))
}

/// Gaussian log density, used by the variational engine.
#[inline]
pub(crate) fn normal_log_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let r = (y - mean) / sd;
    -0.5 * r * r - sd.ln() - 0.5 * (2.0 * PI).ln()
}
