use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::Dataset;
use crate::rng::{std_normal, substream};

/// Synthetic 2-D field observed at scattered sites, with three base models
/// that are each accurate only around their own anchor point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub n_points: usize,
    pub noise_sd: f64,
    /// Size of each base model's error away from its anchor.
    pub bias_scale: f64,
    /// Radius of the region where a base model is accurate.
    pub skill_radius: f64,
    pub seed: u64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            n_points: 60,
            noise_sd: 0.1,
            bias_scale: 0.8,
            skill_radius: 0.3,
            seed: 0,
        }
    }
}

const ANCHORS: [[f64; 2]; 3] = [[0.2, 0.25], [0.8, 0.3], [0.5, 0.85]];

pub fn spatial_truth(x: &[f64]) -> f64 {
    (2.0 * PI * x[0]).sin() * (PI * x[1]).cos() + x[0] * x[1]
}

fn base_prediction(k: usize, x: &[f64], radius: f64, scale: f64) -> f64 {
    let c = ANCHORS[k];
    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    let reach = 1.0 - (-d2 / (2.0 * radius * radius)).exp();
    let wobble = (3.0 * x[0] + 2.0 * x[1] + 2.0 * k as f64).sin() + 0.5;
    spatial_truth(x) + scale * reach * wobble
}

/// Sites uniform on the unit square; columns `base_0..base_2`.
pub fn spatial_dataset(cfg: &SpatialConfig) -> Result<Dataset> {
    let mut rng = substream(cfg.seed, 0);
    let n = cfg.n_points;
    let mut feats = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        feats.extend_from_slice(&x);
        y.push(spatial_truth(&x) + cfg.noise_sd * std_normal::<f64, _>(&mut rng));
        base.extend((0..3).map(|k| base_prediction(k, &x, cfg.skill_radius, cfg.bias_scale)));
    }
    Dataset::new(
        Matrix::from_row_major(n, 2, feats)?,
        y,
        Matrix::from_row_major(n, 3, base)?,
    )
}
