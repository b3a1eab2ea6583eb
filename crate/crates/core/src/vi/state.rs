use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{whitened_projection, InducingSet, KernelConfig, Projection, SparseGpPosterior};
use crate::linalg::{solve_lower_transpose, Matrix};
use crate::model::{Dataset, Hyper, LogNormal, PriorConfig, Standardizer};
use crate::rng::{std_normal, std_normal_vec, StreamRng};
use crate::tailfree::ModelTree;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `q(x) = LogNormal(loc, exp(log_scale)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFactor {
    pub loc: f64,
    pub log_scale: f64,
}

impl LogNormalFactor {
    pub fn at_prior(prior: &LogNormal) -> Self {
        Self {
            loc: prior.mu,
            log_scale: -1.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn median(&self) -> f64 {
        self.loc.exp()
    }

    pub fn mean(&self) -> f64 {
        (self.loc + 0.5 * self.scale().powi(2)).exp()
    }

    pub fn value(&self, eps: f64) -> f64 {
        (self.loc + self.scale() * eps).exp()
    }

    /// `log p(x) - log q(x)` for `x = value(eps)`; the Jacobians cancel.
    pub fn log_ratio(&self, prior: &LogNormal, eps: f64) -> f64 {
        let t = self.loc + self.scale() * eps;
        prior.log_density_of_log(t) - (-0.5 * eps * eps - self.log_scale - 0.5 * LN_2PI)
    }

    /// Score with respect to `(loc, log_scale)`.
    pub fn score(&self, eps: f64) -> [f64; 2] {
        [eps / self.scale(), eps * eps - 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    GpMean { factor: usize, index: usize },
    /// Off-diagonal entry `(row, col)` of the Cholesky factor.
    CholOffDiag { factor: usize, row: usize, col: usize },
    /// Log of a diagonal entry of the Cholesky factor.
    CholLogDiag { factor: usize, index: usize },
    LogNormalLoc { factor: usize },
    LogNormalLogScale { factor: usize },
}

/// Which hyperparameter a log-normal factor describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperRole {
    Temperature(usize),
    NoiseSd,
    WeightLengthscale,
    ResidualLengthscale,
}

/// All variational parameters, together with everything needed to predict
/// without the original configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub tree: ModelTree,
    pub priors: PriorConfig,
    pub standardizer: Standardizer,
    pub inducing: InducingSet<f64>,
    /// One per GP slot of the tree.
    pub weight_gps: Vec<SparseGpPosterior<f64>>,
    pub residual_gp: Option<SparseGpPosterior<f64>>,
    /// Empty when the temperature is pinned; one entry when tied.
    pub temperatures: Vec<LogNormalFactor>,
    pub noise_sd: Option<LogNormalFactor>,
    pub weight_lengthscale: Option<LogNormalFactor>,
    pub residual_lengthscale: Option<LogNormalFactor>,
    pub step_count: usize,
}

/// One joint draw from `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// Standard-normal innovations per GP factor (weight GPs, then residual).
    pub xi: Vec<Vec<f64>>,
    /// Whitened inducing values per GP factor.
    pub v: Vec<Vec<f64>>,
    /// Standard-normal innovation per log-normal factor.
    pub eps: Vec<f64>,
    /// Temperature per temperature slot of the tree.
    pub temperatures: Vec<f64>,
    pub noise_sd: f64,
    pub weight_lengthscale: f64,
    pub residual_lengthscale: f64,
}

impl VariationalState {
    /// Initial state: whitened GP posteriors equal to the prior, log-normal
    /// factors centred on their prior medians with log-scale -1.
    pub fn initialize(data: &Dataset, tree: &ModelTree, priors: &PriorConfig) -> Result<Self> {
        priors.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("cannot fit on an empty dataset"));
        }
        if data.base_predictions().cols() != tree.n_leaves() {
            return Err(Error::TreeMismatch(format!(
                "{} base-model columns for {} leaves",
                data.base_predictions().cols(),
                tree.n_leaves()
            )));
        }
        let standardizer = if priors.standardize {
            Standardizer::from_targets(&data.targets)
        } else {
            Standardizer::identity()
        };
        let inducing = InducingSet::grid_over(data.features(), priors.max_inducing.min(data.len()))?;
        let wk = priors
            .weight_kernel
            .with_lengthscale(priors.weight_lengthscale.center());
        let rk = priors
            .residual_kernel
            .with_lengthscale(priors.residual_lengthscale.center());
        let weight_gps = tree
            .gp_nodes()
            .iter()
            .map(|_| SparseGpPosterior::whitened_prior(inducing.clone(), wk))
            .collect::<Vec<_>>();
        let residual_gp = priors
            .residual
            .then(|| SparseGpPosterior::whitened_prior(inducing.clone(), rk));
        let n_temp = match (priors.temperature.prior(), tree.temperature_nodes().len()) {
            (None, _) | (_, 0) => 0,
            _ if priors.tie_temperatures => 1,
            (_, n) => n,
        };
        let temperatures = priors
            .temperature
            .prior()
            .map(|p| vec![LogNormalFactor::at_prior(&p); n_temp])
            .unwrap_or_default();
        let weight_lengthscale = if weight_gps.is_empty() {
            None
        } else {
            priors.weight_lengthscale.prior().map(|p| LogNormalFactor::at_prior(&p))
        };
        let residual_lengthscale = if residual_gp.is_none() {
            None
        } else {
            priors.residual_lengthscale.prior().map(|p| LogNormalFactor::at_prior(&p))
        };
        Ok(Self {
            tree: tree.clone(),
            priors: priors.clone(),
            standardizer,
            inducing,
            weight_gps,
            residual_gp,
            temperatures,
            noise_sd: priors.noise_sd.prior().map(|p| LogNormalFactor::at_prior(&p)),
            weight_lengthscale,
            residual_lengthscale,
            step_count: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        for gp in self.gp_factors() {
            gp.validate()?;
        }
        if self.weight_gps.len() != self.tree.gp_nodes().len() {
            return Err(Error::TreeMismatch("weight GP count differs from the tree".into()));
        }
        for (f, _) in self.lognormal_factors() {
            if !f.loc.is_finite() || !f.log_scale.is_finite() {
                return Err(Error::invalid("non-finite log-normal parameters"));
            }
        }
        Ok(())
    }

    pub fn gp_factors(&self) -> impl Iterator<Item = &SparseGpPosterior<f64>> {
        self.weight_gps.iter().chain(self.residual_gp.iter())
    }

    fn gp_factors_mut(&mut self) -> impl Iterator<Item = &mut SparseGpPosterior<f64>> {
        self.weight_gps.iter_mut().chain(self.residual_gp.iter_mut())
    }

    pub fn n_gp_factors(&self) -> usize {
        self.weight_gps.len() + usize::from(self.residual_gp.is_some())
    }

    /// Log-normal factors in parameter order with their roles.
    pub fn lognormal_factors(&self) -> Vec<(LogNormalFactor, HyperRole)> {
        let mut out: Vec<_> = self
            .temperatures
            .iter()
            .enumerate()
            .map(|(i, f)| (*f, HyperRole::Temperature(i)))
            .collect();
        out.extend(self.noise_sd.map(|f| (f, HyperRole::NoiseSd)));
        out.extend(self.weight_lengthscale.map(|f| (f, HyperRole::WeightLengthscale)));
        out.extend(self.residual_lengthscale.map(|f| (f, HyperRole::ResidualLengthscale)));
        out
    }

    fn lognormal_factors_mut(&mut self) -> Vec<&mut LogNormalFactor> {
        let mut out: Vec<&mut LogNormalFactor> = self.temperatures.iter_mut().collect();
        out.extend(self.noise_sd.as_mut());
        out.extend(self.weight_lengthscale.as_mut());
        out.extend(self.residual_lengthscale.as_mut());
        out
    }

    fn prior_of(&self, role: HyperRole) -> LogNormal {
        let h = match role {
            HyperRole::Temperature(_) => self.priors.temperature,
            HyperRole::NoiseSd => self.priors.noise_sd,
            HyperRole::WeightLengthscale => self.priors.weight_lengthscale,
            HyperRole::ResidualLengthscale => self.priors.residual_lengthscale,
        };
        h.prior().expect("latent hyperparameter has a prior")
    }

    fn gp_param_len(&self) -> usize {
        let m = self.inducing.count();
        m + m * (m + 1) / 2
    }

    /// Parameter index range of every factor: GP factors first, then
    /// log-normal factors.
    pub fn factor_ranges(&self) -> Vec<Range<usize>> {
        let g = self.gp_param_len();
        let mut out = vec![];
        let mut at = 0;
        for _ in 0..self.n_gp_factors() {
            out.push(at..at + g);
            at += g;
        }
        for _ in 0..self.lognormal_factors().len() {
            out.push(at..at + 2);
            at += 2;
        }
        out
    }

    pub fn n_factors(&self) -> usize {
        self.n_gp_factors() + self.lognormal_factors().len()
    }

    pub fn n_params(&self) -> usize {
        self.n_gp_factors() * self.gp_param_len() + 2 * self.lognormal_factors().len()
    }

    /// Flat parameter vector. Per GP: the mean, then the lower triangle of
    /// the Cholesky factor row by row with diagonal entries stored as logs.
    /// Per log-normal factor: `(loc, log_scale)`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for gp in self.gp_factors() {
            p.extend_from_slice(&gp.variational_mean);
            let s = &gp.variational_cov_chol;
            for a in 0..s.rows() {
                for b in 0..=a {
                    p.push(if a == b { s[(a, a)].ln() } else { s[(a, b)] });
                }
            }
        }
        for (f, _) in self.lognormal_factors() {
            p.push(f.loc);
            p.push(f.log_scale);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut at = 0;
        for gp in self.gp_factors_mut() {
            let m = gp.variational_mean.len();
            gp.variational_mean.copy_from_slice(&p[at..at + m]);
            at += m;
            for a in 0..m {
                for b in 0..=a {
                    gp.variational_cov_chol[(a, b)] = if a == b { p[at].exp() } else { p[at] };
                    at += 1;
                }
            }
        }
        for f in self.lognormal_factors_mut() {
            f.loc = p[at];
            f.log_scale = p[at + 1];
            at += 2;
        }
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let m = self.inducing.count();
        let mut out = vec![];
        for factor in 0..self.n_gp_factors() {
            out.extend((0..m).map(|index| ParamKind::GpMean { factor, index }));
            for a in 0..m {
                for b in 0..=a {
                    out.push(if a == b {
                        ParamKind::CholLogDiag { factor, index: a }
                    } else {
                        ParamKind::CholOffDiag {
                            factor,
                            row: a,
                            col: b,
                        }
                    });
                }
            }
        }
        let base = self.n_gp_factors();
        for i in 0..self.lognormal_factors().len() {
            out.push(ParamKind::LogNormalLoc { factor: base + i });
            out.push(ParamKind::LogNormalLogScale { factor: base + i });
        }
        out
    }

    /// Joint draw of every latent variable.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let mut xi = Vec::with_capacity(self.n_gp_factors());
        let mut v = Vec::with_capacity(self.n_gp_factors());
        for gp in self.gp_factors() {
            let x: Vec<f64> = std_normal_vec(rng, gp.count());
            let mut val = gp.variational_cov_chol.matvec(&x);
            for (a, b) in val.iter_mut().zip(&gp.variational_mean) {
                *a += b;
            }
            xi.push(x);
            v.push(val);
        }
        let factors = self.lognormal_factors();
        let eps: Vec<f64> = factors.iter().map(|_| std_normal(rng)).collect();
        let n_slots = self.tree.temperature_nodes().len();
        let mut temperatures = vec![self.priors.temperature.fixed().unwrap_or(1.0); n_slots];
        let mut noise_sd = self.priors.noise_sd.fixed().unwrap_or(1.0);
        let mut weight_lengthscale = self.priors.weight_lengthscale.fixed().unwrap_or(1.0);
        let mut residual_lengthscale = self.priors.residual_lengthscale.fixed().unwrap_or(1.0);
        for ((f, role), &e) in factors.iter().zip(&eps) {
            let x = f.value(e);
            match role {
                HyperRole::Temperature(i) => {
                    if self.temperatures.len() == 1 {
                        temperatures.iter_mut().for_each(|t| *t = x);
                    } else {
                        temperatures[*i] = x;
                    }
                }
                HyperRole::NoiseSd => noise_sd = x,
                HyperRole::WeightLengthscale => weight_lengthscale = x,
                HyperRole::ResidualLengthscale => residual_lengthscale = x,
            }
        }
        Draw {
            xi,
            v,
            eps,
            temperatures,
            noise_sd,
            weight_lengthscale,
            residual_lengthscale,
        }
    }

    /// `log p_j(z_j) - log q_j(z_j)` for every factor `j`, given the GP
    /// prior terms from [`LatentSampler::values`].
    pub fn factor_log_ratios(&self, draw: &Draw, gp_log_prior: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_factors());
        for (gp, (xi, lp)) in self.gp_factors().zip(draw.xi.iter().zip(gp_log_prior)) {
            let s = &gp.variational_cov_chol;
            let log_det: f64 = (0..s.rows()).map(|a| s[(a, a)].ln()).sum();
            let xx: f64 = xi.iter().map(|x| x * x).sum();
            let log_q = -0.5 * xx - log_det - 0.5 * xi.len() as f64 * LN_2PI;
            out.push(lp - log_q);
        }
        for ((f, role), &e) in self.lognormal_factors().iter().zip(&draw.eps) {
            out.push(f.log_ratio(&self.prior_of(*role), e));
        }
        out
    }

    /// `grad_theta log q(z)` at the draw, in the flat parameter layout.
    pub fn score(&self, draw: &Draw) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (gp, xi) in self.gp_factors().zip(&draw.xi) {
            let s = &gp.variational_cov_chol;
            // w = S^{-T} xi = (S S^T)^{-1} (v - m)
            let w = solve_lower_transpose(s, xi);
            out.extend_from_slice(&w);
            for a in 0..s.rows() {
                for b in 0..=a {
                    out.push(if a == b {
                        s[(a, a)] * w[a] * xi[a] - 1.0
                    } else {
                        w[a] * xi[b]
                    });
                }
            }
        }
        for ((f, _), &e) in self.lognormal_factors().iter().zip(&draw.eps) {
            out.extend_from_slice(&f.score(e));
        }
        out
    }

    /// Weight-GP kernel at a given lengthscale.
    pub fn weight_kernel(&self, lengthscale: f64) -> KernelConfig<f64> {
        self.priors.weight_kernel.with_lengthscale(lengthscale)
    }

    pub fn residual_kernel(&self, lengthscale: f64) -> KernelConfig<f64> {
        self.priors.residual_kernel.with_lengthscale(lengthscale)
    }

    /// Writes the posterior medians of the learned lengthscales into the GP
    /// kernel records so the stored kernels describe the fitted model.
    pub(crate) fn sync_kernels(&mut self) {
        if let Some(f) = self.weight_lengthscale {
            let k = self.weight_kernel(f.median());
            self.weight_gps.iter_mut().for_each(|gp| gp.kernel = k);
        }
        if let Some(f) = self.residual_lengthscale {
            let k = self.residual_kernel(f.median());
            if let Some(gp) = self.residual_gp.as_mut() {
                gp.kernel = k;
            }
        }
    }
}

/// GP draws and their prior log densities at a fixed set of points.
pub struct LatentValues {
    /// Weight-GP values per GP slot.
    pub g: Vec<Vec<f64>>,
    pub residual: Option<Vec<f64>>,
    /// `log p(u_j)` per GP factor (weight GPs, then residual).
    pub gp_log_prior: Vec<f64>,
}

/// Evaluates the GP draws at a fixed set of points, reusing the projection
/// when the lengthscale is pinned.
pub struct LatentSampler {
    features: Matrix<f64>,
    weight: Option<Projection<f64>>,
    residual: Option<Projection<f64>>,
}

impl LatentSampler {
    pub fn new(state: &VariationalState, features: &Matrix<f64>) -> Result<Self> {
        let weight = match state.priors.weight_lengthscale {
            Hyper::Fixed(l) if !state.weight_gps.is_empty() => {
                Some(whitened_projection(&state.inducing, &state.weight_kernel(l), features)?)
            }
            _ => None,
        };
        let residual = match state.priors.residual_lengthscale {
            Hyper::Fixed(l) if state.residual_gp.is_some() => {
                Some(whitened_projection(&state.inducing, &state.residual_kernel(l), features)?)
            }
            _ => None,
        };
        Ok(Self {
            features: features.clone(),
            weight,
            residual,
        })
    }

    /// Process values for whitened inducing draw `v` and its prior log
    /// density. With `rng`, independent conditional spread given the inducing
    /// values is added at each point.
    fn apply(proj: &Projection<f64>, v: &[f64], rng: Option<&mut StreamRng>) -> (Vec<f64>, f64) {
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut f = proj.apply(v);
        if let Some(rng) = rng {
            for (fi, &cv) in f.iter_mut().zip(&proj.conditional_var) {
                *fi += cv.sqrt() * std_normal::<f64, _>(rng);
            }
        }
        (f, -0.5 * vv - 0.5 * v.len() as f64 * LN_2PI)
    }

    pub fn values(
        &self,
        state: &VariationalState,
        draw: &Draw,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<LatentValues> {
        let nw = state.weight_gps.len();
        let mut out = LatentValues {
            g: Vec::with_capacity(nw),
            residual: None,
            gp_log_prior: Vec::with_capacity(state.n_gp_factors()),
        };
        if nw > 0 {
            let owned;
            let proj = match &self.weight {
                Some(p) => p,
                None => {
                    owned = whitened_projection(
                        &state.inducing,
                        &state.weight_kernel(draw.weight_lengthscale),
                        &self.features,
                    )?;
                    &owned
                }
            };
            for u in &draw.v[..nw] {
                let (f, lp) = Self::apply(proj, u, rng.as_deref_mut());
                out.g.push(f);
                out.gp_log_prior.push(lp);
            }
        }
        if state.residual_gp.is_some() {
            let owned;
            let proj = match &self.residual {
                Some(p) => p,
                None => {
                    owned = whitened_projection(
                        &state.inducing,
                        &state.residual_kernel(draw.residual_lengthscale),
                        &self.features,
                    )?;
                    &owned
                }
            };
            let (f, lp) = Self::apply(proj, &draw.v[nw], rng);
            out.residual = Some(f);
            out.gp_log_prior.push(lp);
        }
        Ok(out)
    }
}
