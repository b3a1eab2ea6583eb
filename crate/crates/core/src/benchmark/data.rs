use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::{cross_kernel, KernelConfig};
use crate::linalg::{cholesky_solve, Matrix};
use crate::model::{Dataset, Inputs};
use crate::rng::{std_normal, substream};

/// `x + sin(4x) + sin(13x)` plus `0.5 sin(40x)` on `0.1 < x < 0.6`.
pub fn true_function(x: f64) -> f64 {
    let slow = x + (4.0 * x).sin() + (13.0 * x).sin();
    let fast = if x > 0.1 && x < 0.6 { 0.5 * (40.0 * x).sin() } else { 0.0 };
    slow + fast
}

/// Where the observation noise enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `y = f(x) + e`
    #[default]
    Additive,
    /// `y = f(x + e)`
    Input,
}

/// Raw 1-D sample: inputs and noisy targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample1d {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// `n` points with `x ~ U(0, 1)` and noisy targets.
pub fn generate_sample<R: Rng + ?Sized>(n: usize, noise_sd: f64, noise: NoiseModel, rng: &mut R) -> Sample1d {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.gen();
        let e = noise_sd * std_normal::<f64, _>(rng);
        x.push(xi);
        y.push(match noise {
            NoiseModel::Additive => true_function(xi) + e,
            NoiseModel::Input => true_function(xi + e),
        });
    }
    Sample1d { x, y }
}

/// Seeded variant of [`generate_sample`].
pub fn generate_dataset(n: usize, noise_sd: f64, noise: NoiseModel, seed: u64) -> Sample1d {
    generate_sample(n, noise_sd, noise, &mut substream(seed, 0))
}

/// `n` evenly spaced points strictly inside `(0, 1)` with noise-free targets.
pub fn validation_grid(n: usize) -> Sample1d {
    let x: Vec<f64> = (0..n).map(|j| (j + 1) as f64 / (n + 1) as f64).collect();
    let y = x.iter().map(|&v| true_function(v)).collect();
    Sample1d { x, y }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseModelKind {
    /// Nadaraya-Watson regression with RBF weights.
    #[default]
    NadarayaWatson,
    /// Kernel ridge regression with ridge equal to the noise variance.
    KernelRidge,
}

/// A kernel regression fit on its own training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub lengthscale: f64,
    pub kind: BaseModelKind,
    train: Sample1d,
    alpha: Vec<f64>,
}

impl BaseModel {
    pub fn fit(train: Sample1d, lengthscale: f64, kind: BaseModelKind, ridge: f64) -> Result<Self> {
        let alpha = match kind {
            BaseModelKind::NadarayaWatson => vec![],
            BaseModelKind::KernelRidge => {
                let xs = Matrix::column(&train.x);
                let mut k = cross_kernel(&xs, &xs, &KernelConfig::new(lengthscale, 1.0, 0.0)?);
                k.add_diagonal(ridge);
                cholesky_solve(&k.cholesky()?, &train.y)
            }
        };
        Ok(Self {
            lengthscale,
            kind,
            train,
            alpha,
        })
    }

    pub fn predict(&self, x: f64) -> f64 {
        let l2 = 2.0 * self.lengthscale * self.lengthscale;
        let logk = self.train.x.iter().map(|&xi| -(x - xi).powi(2) / l2);
        match self.kind {
            BaseModelKind::NadarayaWatson => {
                // log-sum-exp normalization keeps far-away queries finite
                let max = logk.clone().fold(f64::NEG_INFINITY, f64::max);
                let (num, den) = logk
                    .zip(&self.train.y)
                    .fold((0.0, 0.0), |(n, d), (l, &y)| {
                        let w = (l - max).exp();
                        (n + w * y, d + w)
                    });
                num / den
            }
            BaseModelKind::KernelRidge => logk.zip(&self.alpha).map(|(l, a)| l.exp() * a).sum(),
        }
    }

    pub fn predict_many(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.predict(v)).collect()
    }
}

/// `n x K` matrix of base-model predictions at `x`.
pub fn base_prediction_matrix(models: &[BaseModel], x: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(x.len(), models.len(), |i, k| models[k].predict(x[i]))
}

/// Dataset of 1-D inputs, targets and base predictions.
pub fn dataset_1d(models: &[BaseModel], sample: &Sample1d) -> Result<Dataset> {
    Dataset::new(
        Matrix::column(&sample.x),
        sample.y.clone(),
        base_prediction_matrix(models, &sample.x),
    )
}

pub fn inputs_1d(models: &[BaseModel], x: &[f64]) -> Result<Inputs> {
    Inputs::new(Matrix::column(x), base_prediction_matrix(models, x))
}
