use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use tailfree::benchmark::{generate_dataset, BaseModel, BaseModelKind, NoiseModel};
use tailfree::gp::rbf_kernel;
use tailfree::model::{
    decompose_uncertainty, predict, Dataset, EnsembleModel, Hyper, Inputs, LatentState, PredictOptions,
    PriorConfig,
};
use tailfree::tailfree::{leaf_weights, NodeGpValues, TemperatureSet};
use tailfree::vi::{fit, OptimizerConfig, ParamKind, VariationalState};
use tailfree::{KernelConfig, Matrix, ModelTree};

const LN_2PI: f64 = 1.8378770664093453;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("m{i}")).collect()
}

fn flat_state(tree: &ModelTree, g: Vec<Vec<f64>>, residual: Vec<f64>, lambda: f64, sd: f64) -> LatentState {
    LatentState {
        node_gps: NodeGpValues::from_slots(tree, g).unwrap(),
        residual,
        temps: TemperatureSet::uniform(tree, lambda).unwrap(),
        noise_sd: sd,
    }
}

#[test]
fn ensemble_mean_examples() {
    let tree = ModelTree::flat(&names(2)).unwrap();
    let model = EnsembleModel::new(tree.clone(), PriorConfig::default()).unwrap();
    let data = Dataset::new(Matrix::column(&[0.0]), vec![0.0], Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap()).unwrap();
    let even = flat_state(&tree, vec![vec![0.0], vec![0.0]], vec![0.0], 1.0, 1.0);
    assert_eq!(model.ensemble_mean(&data, &even, 0).unwrap(), 2.0);
    let tilted = flat_state(&tree, vec![vec![1.0], vec![0.0]], vec![0.1], 1.0, 1.0);
    assert!((model.ensemble_mean(&data, &tilted, 0).unwrap() - 1.63788).abs() < 1e-5);

    let single = ModelTree::flat(&names(1)).unwrap();
    let model = EnsembleModel::new(single.clone(), PriorConfig::default()).unwrap();
    let data = Dataset::new(Matrix::column(&[0.0]), vec![0.0], Matrix::column(&[4.5])).unwrap();
    let s = flat_state(&single, vec![], vec![-0.5], 1.0, 1.0);
    assert_eq!(model.ensemble_mean(&data, &s, 0).unwrap(), 4.0);
}

#[test]
fn zero_residual_likelihood_is_half_log_two_pi() {
    let tree = ModelTree::flat(&names(1)).unwrap();
    let model = EnsembleModel::new(tree.clone(), PriorConfig::default()).unwrap();
    let data = Dataset::new(Matrix::column(&[0.2]), vec![1.5], Matrix::column(&[1.2])).unwrap();
    let s = flat_state(&tree, vec![], vec![0.3], 1.0, 1.0);
    assert!((model.log_likelihood(&data, &s).unwrap() + 0.5 * LN_2PI).abs() < 1e-14);
}

fn lognormal_log_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x.ln() - mu) / sd;
    -x.ln() - sd.ln() - 0.5 * LN_2PI - 0.5 * z * z
}

#[test]
fn prior_only_density_without_data() {
    let tree = ModelTree::flat(&names(2)).unwrap();
    let model = EnsembleModel::new(tree.clone(), PriorConfig::default()).unwrap();
    let data = Dataset::new(Matrix::zeros(0, 1), vec![], Matrix::zeros(0, 2)).unwrap();
    let s = flat_state(&tree, vec![vec![], vec![]], vec![], 0.7, 0.2);
    let want = lognormal_log_pdf(0.7, 0.0, 1.0) + lognormal_log_pdf(0.2, -2.0, 1.0);
    assert!((model.joint_log_density(&data, &s).unwrap() - want).abs() < 1e-12);
}

fn mvn_zero_log_pdf(v: &[f64], cov: DMatrix<f64>) -> f64 {
    let n = v.len() as f64;
    let x = DVector::from_column_slice(v);
    let chol = cov.cholesky().unwrap();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = x.dot(&chol.solve(&x));
    -0.5 * (n * LN_2PI + log_det + quad)
}

#[test]
fn joint_density_matches_term_by_term_oracle() {
    let tree = ModelTree::flat(&names(2)).unwrap();
    let priors = PriorConfig::default();
    let model = EnsembleModel::new(tree.clone(), priors.clone()).unwrap();
    let x = [0.1, 0.45, 0.8];
    let y = [0.5, -0.2, 1.3];
    let base = [[0.4, 0.9], [-0.1, 0.2], [1.0, 1.6]];
    let data = Dataset::new(
        Matrix::column(&x),
        y.to_vec(),
        Matrix::from_rows(&base.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
    )
    .unwrap();
    let g = vec![vec![0.3, -0.4, 1.1], vec![-0.2, 0.5, 0.0]];
    let eps = vec![0.05, -0.02, 0.1];
    let (lambda, sigma) = (0.8, 0.3);
    let s = flat_state(&tree, g.clone(), eps.clone(), lambda, sigma);

    let mut want = 0.0;
    for i in 0..3 {
        let (a, b) = ((g[0][i] / lambda).exp(), (g[1][i] / lambda).exp());
        let f = (a * base[i][0] + b * base[i][1]) / (a + b) + eps[i];
        let r = (y[i] - f) / sigma;
        want += -0.5 * LN_2PI - sigma.ln() - 0.5 * r * r;
    }
    let cov = |k: &KernelConfig| {
        DMatrix::from_fn(3, 3, |i, j| rbf_kernel(&[x[i]], &[x[j]], k) + if i == j { k.jitter } else { 0.0 })
    };
    want += mvn_zero_log_pdf(&g[0], cov(&priors.weight_kernel));
    want += mvn_zero_log_pdf(&g[1], cov(&priors.weight_kernel));
    want += mvn_zero_log_pdf(&eps, cov(&priors.residual_kernel));
    want += lognormal_log_pdf(lambda, 0.0, 1.0);
    want += lognormal_log_pdf(sigma, -2.0, 1.0);
    let got = model.joint_log_density(&data, &s).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn corrupted_state_is_rejected() {
    let tree = ModelTree::flat(&names(2)).unwrap();
    let model = EnsembleModel::new(tree.clone(), PriorConfig::default()).unwrap();
    let data = Dataset::new(Matrix::column(&[0.0]), vec![0.0], Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap()).unwrap();
    let s = flat_state(&tree, vec![vec![0.0], vec![f64::NAN]], vec![0.0], 1.0, 1.0);
    assert!(model.joint_log_density(&data, &s).is_err());
    let short = LatentState {
        node_gps: NodeGpValues::new(BTreeMap::new()),
        ..s
    };
    assert!(matches!(model.ensemble_mean(&data, &short, 0), Err(tailfree::Error::TreeMismatch(_))));
}

/// Training data on [0, 1] with three disagreeing base models.
fn toy_data(identical: bool) -> Dataset {
    let x: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let y: Vec<f64> = x.iter().map(|v| (6.0 * v).sin()).collect();
    let base = Matrix::from_fn(12, 3, |i, k| {
        if identical {
            y[i] + 0.1
        } else {
            y[i] + 0.3 * (k as f64 - 1.0) + 0.2 * (k as f64 * x[i]).cos()
        }
    });
    Dataset::new(Matrix::column(&x), y, base).unwrap()
}

fn pinned_priors(noise: f64, residual: bool) -> PriorConfig {
    PriorConfig {
        weight_lengthscale: Hyper::Fixed(0.3),
        residual_lengthscale: Hyper::Fixed(0.3),
        noise_sd: Hyper::Fixed(noise),
        residual,
        standardize: false,
        ..PriorConfig::default()
    }
}

/// Variational state with point-mass factors (tiny scales) at non-trivial means.
fn degenerate_state(data: &Dataset, noise: f64) -> VariationalState {
    let tree = ModelTree::flat(&names(3)).unwrap();
    let base = pinned_priors(noise, true);
    let priors = PriorConfig {
        max_inducing: 5,
        weight_kernel: KernelConfig { jitter: 0.0, ..base.weight_kernel },
        residual_kernel: KernelConfig { jitter: 0.0, ..base.residual_kernel },
        ..base
    };
    let mut state = VariationalState::initialize(data, &tree, &priors).unwrap();
    let kinds = state.param_kinds();
    let mut p = state.params();
    for (i, (v, k)) in p.iter_mut().zip(&kinds).enumerate() {
        *v = match k {
            ParamKind::GpMean { .. } => 0.5 * ((i as f64) * 1.7).sin(),
            ParamKind::CholLogDiag { .. } | ParamKind::LogNormalLogScale { .. } => -30.0,
            ParamKind::CholOffDiag { .. } => 0.0,
            ParamKind::LogNormalLoc { .. } => 0.2,
        };
    }
    state.set_params(&p);
    state
}

fn inputs_at(state: &VariationalState) -> Inputs {
    let locs = state.inducing.locations().col(0);
    let base = Matrix::from_fn(locs.len(), 3, |i, k| 0.2 * k as f64 + locs[i]);
    Inputs::new(Matrix::column(&locs), base).unwrap()
}

fn opts(n: usize, seed: u64, noise: bool) -> PredictOptions {
    PredictOptions {
        n_samples: n,
        seed,
        include_noise: noise,
        ..PredictOptions::default()
    }
}

#[test]
fn degenerate_q_gives_the_ensemble_mean() {
    let data = toy_data(false);
    let state = degenerate_state(&data, 1e-12);
    let q = inputs_at(&state);
    let pred = predict(&state, &q, &opts(50, 1, true)).unwrap();

    let x = &q.features;
    let g: Vec<Vec<f64>> = state.weight_gps.iter().map(|gp| gp.predictive_moments(x).unwrap().0).collect();
    let eps = state.residual_gp.as_ref().unwrap().predictive_moments(x).unwrap().0;
    let tree = &state.tree;
    let temps = TemperatureSet::uniform(tree, state.temperatures[0].median()).unwrap();
    let gv = NodeGpValues::from_slots(tree, g).unwrap();
    for j in 0..q.len() {
        let w = leaf_weights(tree, &gv, &temps, j).unwrap();
        let f: f64 = w.iter().zip(q.base_predictions.row(j)).map(|(a, b)| a * b).sum::<f64>() + eps[j];
        for s in 0..50 {
            assert!((pred.samples[(s, j)] - f).abs() < 1e-3, "{} vs {f}", pred.samples[(s, j)]);
        }
    }
}

#[test]
fn degenerate_q_with_unit_noise_has_unit_spread() {
    let data = toy_data(false);
    let state = degenerate_state(&data, 1.0);
    let q = inputs_at(&state);
    let pred = predict(&state, &q, &opts(100_000, 2, true)).unwrap();
    for sd in &pred.total_sd {
        assert!((sd - 1.0).abs() < 0.02, "total sd {sd}");
    }
}

#[test]
fn identical_base_models_have_no_selection_spread() {
    let data = toy_data(true);
    let tree = ModelTree::flat(&names(3)).unwrap();
    let state = VariationalState::initialize(&data, &tree, &PriorConfig::default()).unwrap();
    let (sel, pred) = decompose_uncertainty(&state, &data.inputs, 2000, 3).unwrap();
    assert!(sel.iter().all(|&s| s < 1e-9), "{sel:?}");
    assert!(pred.iter().all(|&s| s > 0.0));
}

#[test]
fn collapsed_residual_and_noise_leave_no_prediction_spread() {
    let data = toy_data(false);
    let state = degenerate_state(&data, 1e-12);
    let q = inputs_at(&state);
    let (_, pred) = decompose_uncertainty(&state, &q, 500, 3).unwrap();
    assert!(pred.iter().all(|&s| s < 1e-3), "{pred:?}");
}

#[test]
fn mean_is_bracketed_without_residual_or_noise() {
    let data = toy_data(false);
    let tree = ModelTree::flat(&names(3)).unwrap();
    for seed in 0..5 {
        let mut state = VariationalState::initialize(&data, &tree, &pinned_priors(1e-9, false)).unwrap();
        let p: Vec<f64> = state.params().iter().enumerate().map(|(i, v)| v + ((i as f64 + seed as f64) * 0.9).sin()).collect();
        state.set_params(&p);
        let pred = predict(&state, &data.inputs, &opts(500, seed, false)).unwrap();
        for j in 0..data.len() {
            let row = data.inputs.base_predictions.row(j);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(pred.mean[j] >= lo - 1e-12 && pred.mean[j] <= hi + 1e-12);
            for s in 0..500 {
                let v = pred.samples[(s, j)];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn quantiles_are_monotone_and_predict_is_seeded() {
    let data = toy_data(false);
    let tree = ModelTree::flat(&names(3)).unwrap();
    let state = VariationalState::initialize(&data, &tree, &PriorConfig::default()).unwrap();
    let o = PredictOptions {
        quantiles: vec![0.9, 0.01, 0.5, 0.25, 0.99, 0.75, 0.1],
        ..opts(800, 4, true)
    };
    let a = predict(&state, &data.inputs, &o).unwrap();
    for pair in a.quantiles.windows(2) {
        assert!(pair[0].0 < pair[1].0);
        for (lo, hi) in pair[0].1.iter().zip(&pair[1].1) {
            assert!(lo <= hi);
        }
    }
    let b = predict(&state, &data.inputs, &o).unwrap();
    assert_eq!(a, b);
    let c = predict(&state, &data.inputs, &PredictOptions { seed: 5, ..o }).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn variance_splits_into_selection_and_prediction() {
    let data = toy_data(false);
    let tree = ModelTree::flat(&names(3)).unwrap();
    let state = VariationalState::initialize(&data, &tree, &pinned_priors(0.3, true)).unwrap();
    let pred = predict(&state, &data.inputs, &opts(10_000, 6, true)).unwrap();
    for j in 0..data.len() {
        let parts = pred.selection_sd[j].powi(2) + pred.prediction_sd[j].powi(2);
        let total = pred.total_sd[j].powi(2);
        assert!((total - parts).abs() / total < 0.1, "{total} vs {parts}");
    }
}

#[test]
fn selection_spread_grows_away_from_data() {
    let lengthscales = [0.2, 0.1, 0.02, 0.01];
    let models: Vec<BaseModel> = lengthscales
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let s = generate_dataset(20, 0.1, NoiseModel::Additive, 100 + k as u64);
            BaseModel::fit(s, l, BaseModelKind::NadarayaWatson, 0.01).unwrap()
        })
        .collect();
    // holdout confined to the left half of the domain
    let mut hold = generate_dataset(20, 0.1, NoiseModel::Additive, 7);
    for (x, y) in hold.x.iter_mut().zip(hold.y.iter_mut()) {
        *x *= 0.5;
        *y = tailfree::benchmark::true_function(*x);
    }
    let data = tailfree::benchmark::dataset_1d(&models, &hold).unwrap();
    let tree = ModelTree::flat(&names(4)).unwrap();
    let opt = OptimizerConfig {
        max_steps: 1500,
        ..OptimizerConfig::default()
    };
    let res = fit(&data, &PriorConfig::default(), &tree, &opt, true).unwrap();
    let near = tailfree::benchmark::inputs_1d(&models, &hold.x).unwrap();
    let far_x = [0.8, 0.85, 0.9, 0.95];
    let far = tailfree::benchmark::inputs_1d(&models, &far_x).unwrap();
    let (sel_near, _) = decompose_uncertainty(&res.state, &near, 2000, 8).unwrap();
    let (sel_far, _) = decompose_uncertainty(&res.state, &far, 2000, 8).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&sel_far) > mean(&sel_near), "far {sel_far:?} near {sel_near:?}");
}
