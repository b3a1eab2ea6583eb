use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normal_log_pdf, Dataset};
use crate::rng::{std_normal_vec, substream, StreamRng};

use super::state::{Draw, LatentSampler, VariationalState};

thread_local! {
    static CRPS_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of CRPS evaluations (objective or gradient) made on this thread.
pub fn crps_evaluations() -> u64 {
    CRPS_EVALS.with(Cell::get)
}

fn count_crps() {
    CRPS_EVALS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub neg_elbo: f64,
    /// Mean CRPS over data points; absent when the objective is KL only.
    pub crps: Option<f64>,
    /// `neg_elbo + crps_weight * crps`
    pub total: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Monte-Carlo batch of latent draws evaluated at the training points.
pub(crate) struct Batch {
    pub draws: Vec<Draw>,
    pub rngs: Vec<StreamRng>,
    pub loglik: Vec<f64>,
    /// Per sample, `log p_j - log q_j` for every factor.
    pub ratios: Vec<Vec<f64>>,
    /// Per sample, the noise-free ensemble at each training point.
    pub f: Vec<Vec<f64>>,
}

/// Training data on the model scale plus the cached projections.
pub(crate) struct Prepared {
    pub data: Dataset,
    pub sampler: LatentSampler,
}

impl Prepared {
    pub fn new(state: &VariationalState, data: &Dataset) -> Result<Self> {
        if data.base_predictions().cols() != state.tree.n_leaves() {
            return Err(Error::TreeMismatch(format!(
                "{} base-model columns for {} leaves",
                data.base_predictions().cols(),
                state.tree.n_leaves()
            )));
        }
        let data = state.standardizer.dataset(data);
        let sampler = LatentSampler::new(state, data.features())?;
        Ok(Self { data, sampler })
    }
}

pub(crate) fn evaluate(
    state: &VariationalState,
    prep: &Prepared,
    n_samples: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Batch> {
    let data = &prep.data;
    let n = data.len();
    let k = state.tree.n_leaves();
    let mut batch = Batch {
        draws: Vec::with_capacity(n_samples),
        rngs: Vec::with_capacity(n_samples),
        loglik: Vec::with_capacity(n_samples),
        ratios: Vec::with_capacity(n_samples),
        f: Vec::with_capacity(n_samples),
    };
    let mut scratch = vec![0.0; state.tree.nodes().len()];
    let mut w = vec![0.0; k];
    for s in 0..n_samples {
        let mut rng = substream(seed, stream_base + s as u64);
        let draw = state.draw(&mut rng);
        let lv = prep.sampler.values(state, &draw, None)?;
        let (g, eps) = (&lv.g, &lv.residual);
        let mut f = Vec::with_capacity(n);
        let mut ll = 0.0;
        for i in 0..n {
            state
                .tree
                .weights_into(|slot| g[slot][i], |slot| draw.temperatures[slot], &mut scratch, &mut w);
            let fi = w
                .iter()
                .zip(data.base_predictions().row(i))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + eps.as_ref().map_or(0.0, |e| e[i]);
            ll += normal_log_pdf(data.targets[i], fi, draw.noise_sd);
            f.push(fi);
        }
        let ratios = state.factor_log_ratios(&draw, &lv.gp_log_prior);
        if !ll.is_finite() {
            return Err(Error::NonFiniteDensity("log likelihood".into()));
        }
        if ratios.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFiniteDensity("variational log ratio".into()));
        }
        batch.draws.push(draw);
        batch.rngs.push(rng);
        batch.loglik.push(ll);
        batch.ratios.push(ratios);
        batch.f.push(f);
    }
    Ok(batch)
}

fn neg_elbo(batch: &Batch) -> f64 {
    let s = batch.loglik.len() as f64;
    -batch
        .loglik
        .iter()
        .zip(&batch.ratios)
        .map(|(ll, r)| ll + r.iter().sum::<f64>())
        .sum::<f64>()
        / s
}

fn mean_and_se(contrib: &[Vec<f64>], p: usize) -> GradientEstimate {
    let s = contrib.len() as f64;
    let mut mean = vec![0.0; p];
    for c in contrib {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / s;
        }
    }
    let mut var = vec![0.0; p];
    for c in contrib {
        for ((q, v), m) in var.iter_mut().zip(c).zip(&mean) {
            *q += (v - m).powi(2) / (s - 1.0).max(1.0);
        }
    }
    GradientEstimate {
        mean,
        std_err: var.into_iter().map(|v| (v / s).sqrt()).collect(),
    }
}

/// Score-function gradient of the negative ELBO. Each factor only sees the
/// terms of its Markov blanket (likelihood, its own prior and its own `q`),
/// with a leave-one-out mean of the same quantity as baseline.
pub(crate) fn kl_gradient(state: &VariationalState, batch: &Batch, scores: &[Vec<f64>]) -> GradientEstimate {
    let sn = batch.draws.len();
    let p = state.n_params();
    let ranges = state.factor_ranges();
    let mut contrib = vec![vec![0.0; p]; sn];
    for (j, range) in ranges.iter().enumerate() {
        let blanket: Vec<f64> = (0..sn).map(|s| batch.loglik[s] + batch.ratios[s][j]).collect();
        let total: f64 = blanket.iter().sum();
        for s in 0..sn {
            let baseline = (total - blanket[s]) / (sn as f64 - 1.0);
            let c = blanket[s] - baseline;
            for idx in range.clone() {
                contrib[s][idx] = -c * scores[s][idx];
            }
        }
    }
    mean_and_se(&contrib, p)
}

/// Sum over `u != t` of `|y_t - y_u|` for every `t`.
fn abs_deviation_sums(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let total: f64 = y.iter().sum();
    let mut out = vec![0.0; n];
    let mut below = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        let v = y[i];
        let above = total - below - v;
        out[i] = v * r as f64 - below + above - v * (n - r - 1) as f64;
        below += v;
    }
    out
}

pub(crate) struct CrpsTerms {
    /// Mean over data points of the unbiased energy-form CRPS.
    pub value: f64,
    /// Coefficient of each sample's score in the gradient.
    pub coef: Vec<f64>,
}

/// Draws one predictive `y` per sample and data point and forms the CRPS and
/// the coefficients of its score-function gradient. The gradient of
/// `log p_theta(y_t)` is estimated by self-normalized importance weighting of
/// the latent scores with weights `p(y_t | z_s)`.
pub(crate) fn crps_terms(batch: &mut Batch, targets: &[f64]) -> Result<CrpsTerms> {
    count_crps();
    let sn = batch.draws.len();
    let n = targets.len();
    let y: Vec<Vec<f64>> = (0..sn)
        .map(|s| {
            let eta: Vec<f64> = std_normal_vec(&mut batch.rngs[s], n);
            let sd = batch.draws[s].noise_sd;
            batch.f[s].iter().zip(eta).map(|(f, e)| f + sd * e).collect()
        })
        .collect();
    let sf = sn as f64;
    let mut coef = vec![0.0; sn];
    let mut value = 0.0;
    let mut logw = vec![0.0; sn];
    let mut col = vec![0.0; sn];
    for i in 0..n {
        for s in 0..sn {
            col[s] = y[s][i];
        }
        let pair = abs_deviation_sums(&col);
        let a: Vec<f64> = col.iter().map(|v| (v - targets[i]).abs()).collect();
        let c: Vec<f64> = pair.iter().map(|p| p / (sf - 1.0)).collect();
        value += (a.iter().sum::<f64>() - 0.5 * c.iter().sum::<f64>()) / sf;
        let d: Vec<f64> = a.iter().zip(&c).map(|(a, c)| a - c).collect();
        let d_mean = d.iter().sum::<f64>() / sf;
        for t in 0..sn {
            let mut max = f64::NEG_INFINITY;
            for s in 0..sn {
                logw[s] = normal_log_pdf(col[t], batch.f[s][i], batch.draws[s].noise_sd);
                max = max.max(logw[s]);
            }
            if !max.is_finite() {
                return Err(Error::DegenerateWeights);
            }
            let norm: f64 = logw.iter().map(|l| (l - max).exp()).sum();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateWeights);
            }
            let scale = (d[t] - d_mean) / (sf * n as f64 * norm);
            for s in 0..sn {
                coef[s] += scale * (logw[s] - max).exp();
            }
        }
    }
    Ok(CrpsTerms {
        value: value / n as f64,
        coef,
    })
}

fn crps_gradient(state: &VariationalState, terms: &CrpsTerms, scores: &[Vec<f64>]) -> GradientEstimate {
    let sn = scores.len() as f64;
    let contrib: Vec<Vec<f64>> = terms
        .coef
        .iter()
        .zip(scores)
        .map(|(c, h)| h.iter().map(|v| sn * c * v).collect())
        .collect();
    mean_and_se(&contrib, state.n_params())
}

/// One optimizer step's worth of estimates: the objective and its gradient.
pub(crate) fn step_estimate(
    state: &VariationalState,
    prep: &Prepared,
    n_samples: usize,
    seed: u64,
    stream_base: u64,
    crps_weight: Option<f64>,
) -> Result<(ObjectiveEstimate, Vec<f64>)> {
    let mut batch = evaluate(state, prep, n_samples, seed, stream_base)?;
    let scores: Vec<Vec<f64>> = batch.draws.iter().map(|d| state.score(d)).collect();
    let mut grad = kl_gradient(state, &batch, &scores).mean;
    let ne = neg_elbo(&batch);
    let mut est = ObjectiveEstimate {
        neg_elbo: ne,
        crps: None,
        total: ne,
        n_samples,
    };
    if let Some(w) = crps_weight {
        let terms = crps_terms(&mut batch, &prep.data.targets)?;
        for (g, h) in grad.iter_mut().zip(crps_gradient(state, &terms, &scores).mean) {
            *g += w * h;
        }
        est.crps = Some(terms.value);
        est.total = ne + w * terms.value;
    }
    Ok((est, grad))
}

fn check_samples(n_samples: usize) -> Result<()> {
    if n_samples < 2 {
        return Err(Error::invalid("Monte-Carlo estimates need at least two samples"));
    }
    Ok(())
}

/// Monte-Carlo ELBO `E_q[log p(y, z) - log q(z)]` on the model scale.
pub fn elbo_estimate(data: &Dataset, state: &VariationalState, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("ELBO estimate needs at least one sample"));
    }
    let prep = Prepared::new(state, data)?;
    Ok(-neg_elbo(&evaluate(state, &prep, n_samples, seed, 0)?))
}

/// Score-function estimate of the gradient of the negative ELBO.
pub fn score_grad_kl(
    data: &Dataset,
    state: &VariationalState,
    n_samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    check_samples(n_samples)?;
    let prep = Prepared::new(state, data)?;
    let batch = evaluate(state, &prep, n_samples, seed, 0)?;
    let scores: Vec<Vec<f64>> = batch.draws.iter().map(|d| state.score(d)).collect();
    Ok(kl_gradient(state, &batch, &scores))
}

/// Score-function estimate of the gradient of the mean CRPS over data points.
pub fn score_grad_crps(
    data: &Dataset,
    state: &VariationalState,
    n_samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    check_samples(n_samples)?;
    let prep = Prepared::new(state, data)?;
    let mut batch = evaluate(state, &prep, n_samples, seed, 0)?;
    let scores: Vec<Vec<f64>> = batch.draws.iter().map(|d| state.score(d)).collect();
    let terms = crps_terms(&mut batch, &prep.data.targets)?;
    Ok(crps_gradient(state, &terms, &scores))
}

/// Mean over data points of the CRPS of the variational predictive law,
/// estimated from one predictive draw per latent sample.
pub fn crps_objective(data: &Dataset, state: &VariationalState, n_samples: usize, seed: u64) -> Result<f64> {
    check_samples(n_samples)?;
    let prep = Prepared::new(state, data)?;
    let mut batch = evaluate(state, &prep, n_samples, seed, 0)?;
    Ok(crps_terms(&mut batch, &prep.data.targets)?.value)
}

/// Objective estimate; `crps_weight = None` gives the KL-only objective.
pub fn objective_estimate(
    data: &Dataset,
    state: &VariationalState,
    n_samples: usize,
    seed: u64,
    crps_weight: Option<f64>,
) -> Result<ObjectiveEstimate> {
    check_samples(n_samples)?;
    let prep = Prepared::new(state, data)?;
    Ok(step_estimate(state, &prep, n_samples, seed, 0, crps_weight)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_sums_match_brute_force() {
        let y = [0.3, -1.0, 2.5, 0.3, 7.0];
        let fast = abs_deviation_sums(&y);
        for (t, &v) in y.iter().enumerate() {
            let brute: f64 = y.iter().map(|u| (v - u).abs()).sum();
            assert!((fast[t] - brute).abs() < 1e-12);
        }
    }
}
