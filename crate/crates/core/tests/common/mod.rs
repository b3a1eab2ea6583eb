//! Toys shared by the unit suites and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use tailfree::model::{Dataset, Hyper, PriorConfig};
use tailfree::rng::{std_normal_vec, substream};
use tailfree::tailfree::NodeGpValues;
use tailfree::vi::{crps_objective, elbo_estimate, score_grad_crps, score_grad_kl, VariationalState};
use tailfree::{KernelConfig, Matrix, ModelTree, TreeSpec};

pub fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("m{i}")).collect()
}

fn random_spec<R: Rng>(leaves: &[String], depth: usize, rng: &mut R) -> TreeSpec {
    if depth == 0 || leaves.len() == 1 || rng.gen_bool(0.3) {
        return TreeSpec::Leaves(leaves.to_vec());
    }
    let n_groups = rng.gen_range(1..=leaves.len().min(3));
    let mut cuts: Vec<usize> = (1..leaves.len()).collect();
    for i in (1..cuts.len()).rev() {
        cuts.swap(i, rng.gen_range(0..=i));
    }
    let mut cuts: Vec<usize> = cuts.into_iter().take(n_groups - 1).collect();
    cuts.sort_unstable();
    let mut groups = BTreeMap::new();
    let mut start = 0;
    for (g, end) in cuts.into_iter().chain([leaves.len()]).enumerate() {
        groups.insert(format!("g{g}"), random_spec(&leaves[start..end], depth - 1, rng));
        start = end;
    }
    TreeSpec::Groups(groups)
}

/// Random tree of depth at most 3 over `k` base models.
pub fn random_tree(k: usize, seed: u64) -> ModelTree {
    let leaves = names(k);
    let mut rng = substream(seed, 0);
    let spec = random_spec(&leaves, 2, &mut rng);
    let tree = ModelTree::from_spec(&spec, &leaves).unwrap();
    assert!(tree.depth() <= 3);
    tree
}

pub fn random_g(tree: &ModelTree, n: usize, scale: f64, seed: u64) -> NodeGpValues<f64> {
    let mut rng = substream(seed, 1);
    let slots = (0..tree.gp_nodes().len())
        .map(|_| (0..n).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect())
        .collect();
    NodeGpValues::from_slots(tree, slots).unwrap()
}

/// Product over the ancestry of `1 / (number of siblings)`.
pub fn uniform_product(tree: &ModelTree) -> Vec<f64> {
    (0..tree.n_leaves())
        .map(|k| {
            let mut w = 1.0;
            let mut cur = tree.leaf_node(k);
            while let Some(p) = tree.nodes()[cur].parent {
                w /= tree.nodes()[p].children.len() as f64;
                cur = p;
            }
            w
        })
        .collect()
}

pub fn toy_data(x: &[f64], y: &[f64], base: &[f64]) -> Dataset {
    Dataset::new(Matrix::column(x), y.to_vec(), Matrix::column(base)).unwrap()
}

pub fn one_model_tree() -> ModelTree {
    ModelTree::flat(&["m"]).unwrap()
}

/// Only the noise scale is latent: two parameters.
pub fn lognormal_toy() -> (Dataset, VariationalState) {
    let data = toy_data(&[0.1, 0.5, 0.9], &[0.3, -0.2, 0.6], &[0.1, 0.0, 0.2]);
    let priors = PriorConfig {
        residual: false,
        standardize: false,
        noise_sd: Hyper::LogNormal { mu: -1.0, sd: 1.0 },
        ..PriorConfig::default()
    };
    let mut state = VariationalState::initialize(&data, &one_model_tree(), &priors).unwrap();
    state.set_params(&[-1.3, -0.7]);
    (data, state)
}

/// Residual GP with `m` inducing points, everything else pinned.
pub fn gp_toy(m: usize) -> (Dataset, VariationalState) {
    let data = toy_data(&[0.0, 0.5, 1.0], &[0.4, 0.9, -0.1], &[0.0, 0.2, 0.1]);
    let priors = PriorConfig {
        residual_kernel: KernelConfig::new(0.5, 1.0, 1e-6).unwrap(),
        residual_lengthscale: Hyper::Fixed(0.5),
        noise_sd: Hyper::Fixed(0.4),
        standardize: false,
        max_inducing: m,
        ..PriorConfig::default()
    };
    let mut state = VariationalState::initialize(&data, &one_model_tree(), &priors).unwrap();
    let mut p = state.params();
    for (i, v) in p.iter_mut().enumerate() {
        *v += 0.15 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    state.set_params(&p);
    (data, state)
}

/// Central difference of `objective` in parameter `idx`, averaged over
/// independent seed batches with common random numbers inside each batch.
pub fn finite_difference(
    state: &VariationalState,
    idx: usize,
    h: f64,
    batches: u64,
    per_batch: usize,
    objective: impl Fn(&VariationalState, usize, u64) -> f64,
) -> (f64, f64) {
    let base = state.params();
    let at = |delta: f64| {
        let mut s = state.clone();
        let mut p = base.clone();
        p[idx] += delta;
        s.set_params(&p);
        s
    };
    let (plus, minus) = (at(h), at(-h));
    let d: Vec<f64> = (0..batches)
        .map(|b| (objective(&plus, per_batch, 1000 + b) - objective(&minus, per_batch, 1000 + b)) / (2.0 * h))
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub score: f64,
    pub fd: f64,
    /// Combined standard error of the two estimates.
    pub se: f64,
}

impl GradCheck {
    pub fn within(&self, k: f64) -> bool {
        (self.score - self.fd).abs() < k * self.se
    }
}

/// Score-function gradients at `S = 1e4` against finite differences of the
/// negative ELBO and of the CRPS term, for parameter `idx`.
pub fn grad_checks(data: &Dataset, state: &VariationalState, idx: usize) -> (GradCheck, GradCheck) {
    let kl = score_grad_kl(data, state, 10_000, 7).unwrap();
    let (fd, fd_se) = finite_difference(state, idx, 1e-4, 20, 500, |s, n, seed| {
        -elbo_estimate(data, s, n, seed).unwrap()
    });
    let kl = GradCheck {
        score: kl.mean[idx],
        fd,
        se: (kl.std_err[idx].powi(2) + fd_se.powi(2)).sqrt(),
    };
    let cr = score_grad_crps(data, state, 10_000, 7).unwrap();
    let (fd, fd_se) = finite_difference(state, idx, 1e-4, 20, 500, |s, n, seed| {
        crps_objective(data, s, n, seed).unwrap()
    });
    let cr = GradCheck {
        score: cr.mean[idx],
        fd,
        se: (cr.std_err[idx].powi(2) + fd_se.powi(2)).sqrt(),
    };
    (kl, cr)
}

pub struct Conjugate {
    pub data: Dataset,
    pub priors: PriorConfig,
    pub post_mean: f64,
    pub post_var: f64,
    pub log_evidence: f64,
}

/// `y_i = eps + e_i` at a single input, `eps ~ N(0, 1)`, `e_i ~ N(0, 0.25)`.
pub fn conjugate_toy() -> Conjugate {
    let n = 20;
    let sigma: f64 = 0.5;
    let tau2 = 1.0;
    let y: Vec<f64> = std_normal_vec(&mut substream(11, 0), n)
        .into_iter()
        .map(|z: f64| 0.8 + sigma * z)
        .collect();
    let data = toy_data(&vec![0.5; n], &y, &vec![0.0; n]);
    let priors = PriorConfig {
        residual_kernel: KernelConfig::new(0.3, tau2, 1e-9).unwrap(),
        residual_lengthscale: Hyper::Fixed(0.3),
        noise_sd: Hyper::Fixed(sigma),
        standardize: false,
        ..PriorConfig::default()
    };
    let s2 = sigma * sigma;
    let sum: f64 = y.iter().sum();
    let sq: f64 = y.iter().map(|v| v * v).sum();
    let nf = n as f64;
    let post_mean = tau2 * sum / (s2 + nf * tau2);
    let post_var = 1.0 / (1.0 / tau2 + nf / s2);
    let log_det = nf * s2.ln() + (1.0 + nf * tau2 / s2).ln();
    let quad = (sq - tau2 * sum * sum / (s2 + nf * tau2)) / s2;
    let log_evidence = -0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    Conjugate {
        data,
        priors,
        post_mean,
        post_var,
        log_evidence,
    }
}
