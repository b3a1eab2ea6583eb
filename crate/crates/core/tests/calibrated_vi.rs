mod common;

use common::{conjugate_toy, gp_toy, grad_checks, lognormal_toy, one_model_tree};
use tailfree::model::{Dataset, PriorConfig};
use tailfree::rng::{std_normal_vec, substream};
use tailfree::scoring::{crps_energy_estimate, cvm_numeric, IntegrationGrid};
use tailfree::vi::{
    crps_evaluations, elbo_estimate, fit, score_grad_kl, OptimizerConfig,
    ParamKind, VariationalState,
};
use tailfree::{Matrix, ModelTree};

fn check_kind(label: &str, state: &VariationalState, data: &Dataset, pick: impl Fn(&ParamKind) -> bool) {
    let idx = state.param_kinds().iter().position(pick).expect("parameter kind present");
    let (kl, cr) = grad_checks(data, state, idx);
    assert!(kl.within(3.0), "{label} kl: {kl:?}");
    assert!(cr.within(3.0), "{label} crps: {cr:?}");
}

#[test]
fn gradient_lognormal_location() {
    let (data, state) = lognormal_toy();
    assert_eq!(state.n_params(), 2);
    check_kind("loc", &state, &data, |k| matches!(k, ParamKind::LogNormalLoc { .. }));
}

#[test]
fn gradient_lognormal_log_scale() {
    let (data, state) = lognormal_toy();
    check_kind("log-scale", &state, &data, |k| {
        matches!(k, ParamKind::LogNormalLogScale { .. })
    });
}

#[test]
fn gradient_gp_mean() {
    let (data, state) = gp_toy(1);
    assert_eq!(state.n_params(), 2);
    check_kind("gp mean", &state, &data, |k| matches!(k, ParamKind::GpMean { .. }));
}

#[test]
fn gradient_cholesky_diagonal() {
    let (data, state) = gp_toy(1);
    check_kind("chol diag", &state, &data, |k| matches!(k, ParamKind::CholLogDiag { .. }));
}

#[test]
fn gradient_cholesky_off_diagonal() {
    let (data, state) = gp_toy(2);
    check_kind("chol off-diag", &state, &data, |k| {
        matches!(k, ParamKind::CholOffDiag { .. })
    });
}

#[test]
fn crps_two_point_example() {
    assert!((crps_energy_estimate(&[0.0f64, 2.0], 1.0) - 0.5).abs() < 1e-12);
    let grid = IntegrationGrid::spanning(&[0.0, 2.0], 1.0, 0.5, 200_001);
    assert!((cvm_numeric(&[0.0f64, 2.0], 1.0, grid) - 0.5).abs() < 1e-4);
}

#[test]
fn crps_point_mass_is_zero() {
    let s = [1.5; 8];
    assert_eq!(crps_energy_estimate(&s, 1.5), 0.0);
    assert!(cvm_numeric(&s, 1.5, IntegrationGrid::spanning(&s, 1.5, 1.0, 1001)) < 1e-12);
}

#[test]
fn crps_gaussian_oracle() {
    let samples: Vec<f64> = std_normal_vec(&mut substream(3, 0), 100_000);
    let energy = crps_energy_estimate(&samples, 0.0);
    let numeric = cvm_numeric(&samples, 0.0, IntegrationGrid::spanning(&samples, 0.0, 1.0, 200_001));
    let closed = 2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
    assert!((closed - 0.23370).abs() < 1e-5);
    assert!((energy - numeric).abs() < 1e-2);
    assert!((energy - 0.23370).abs() < 1e-2);
}

#[test]
fn elbo_with_prior_q_is_expected_log_likelihood() {
    let (data, mut state) = lognormal_toy();
    // q equal to the prior: loc = mu, scale = prior sd
    state.set_params(&[-1.0, 0.0]);
    let elbo = elbo_estimate(&data, &state, 20_000, 5).unwrap();
    let mut rng = substream(77, 0);
    let draws: Vec<f64> = std_normal_vec(&mut rng, 200_000);
    let ll: Vec<f64> = draws
        .iter()
        .map(|z| {
            let sd = (-1.0 + z).exp();
            (0..data.len())
                .map(|i| {
                    let r = (data.targets[i] - data.base_predictions()[(i, 0)]) / sd;
                    -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * r * r
                })
                .sum::<f64>()
        })
        .collect();
    let n = ll.len() as f64;
    let mean = ll.iter().sum::<f64>() / n;
    let sd = (ll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd * (1.0 / 20_000.0 + 1.0 / n).sqrt();
    assert!((elbo - mean).abs() < 4.0 * se, "elbo {elbo} vs {mean} (se {se})");
}

#[test]
fn elbo_spread_shrinks_like_root_s() {
    let (data, state) = lognormal_toy();
    let spread = |s: usize| {
        let v: Vec<f64> = (0..60).map(|seed| elbo_estimate(&data, &state, s, seed).unwrap()).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let ratio = spread(100) / spread(400);
    assert!((1.5..2.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn gradient_spread_shrinks_like_root_s() {
    let (data, state) = gp_toy(1);
    let spread = |s: usize| {
        let v: Vec<Vec<f64>> = (0..60).map(|seed| score_grad_kl(&data, &state, s, seed).unwrap().mean).collect();
        (0..2)
            .map(|j| {
                let m = v.iter().map(|g| g[j]).sum::<f64>() / v.len() as f64;
                (v.iter().map(|g| (g[j] - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            })
            .collect::<Vec<f64>>()
    };
    let (a, b) = (spread(100), spread(400));
    for (x, y) in a.iter().zip(&b) {
        let r = x / y;
        assert!((1.5..2.6).contains(&r), "ratio {r}");
    }
}

#[test]
fn conjugate_recovery() {
    let toy = conjugate_toy();
    let opt = OptimizerConfig {
        seed: 4,
        ..OptimizerConfig::default()
    };
    let res = fit(&toy.data, &toy.priors, &one_model_tree(), &opt, false).unwrap();
    let gp = res.state.residual_gp.as_ref().unwrap();
    assert_eq!(gp.count(), 1);
    let (mean, _) = gp.predictive_moments(&Matrix::column(&[0.5])).unwrap();
    let rel = (mean[0] - toy.post_mean).abs() / toy.post_mean.abs();
    assert!(rel < 0.02, "mean {} vs {} ({rel})", mean[0], toy.post_mean);
    let elbo = elbo_estimate(&toy.data, &res.state, 100_000, 9).unwrap();
    assert!(elbo <= toy.log_evidence + 0.01);
    assert!((elbo - toy.log_evidence).abs() < 0.05, "elbo {elbo} vs {}", toy.log_evidence);
}

#[test]
fn exact_posterior_is_stationary() {
    let toy = conjugate_toy();
    let mut state = VariationalState::initialize(&toy.data, &one_model_tree(), &toy.priors).unwrap();
    state.set_params(&[toy.post_mean, 0.5 * toy.post_var.ln()]);
    let g = score_grad_kl(&toy.data, &state, 20_000, 2).unwrap();
    // log p(y, z) - log q(z) is the log evidence for every draw
    for m in &g.mean {
        assert!(m.abs() < 1e-6, "gradient {m}");
    }
}

#[test]
fn zero_steps_returns_initial_state() {
    let (data, state) = gp_toy(2);
    let opt = OptimizerConfig {
        max_steps: 0,
        ..OptimizerConfig::default()
    };
    let res = fit(&data, &state.priors, &state.tree, &opt, true).unwrap();
    let init = VariationalState::initialize(&data, &state.tree, &state.priors).unwrap();
    assert_eq!(res.state.params(), init.params());
    assert!(res.trace.is_empty());
}

#[test]
fn fit_is_deterministic() {
    let (data, state) = gp_toy(2);
    let opt = OptimizerConfig {
        max_steps: 200,
        ..OptimizerConfig::default()
    };
    let a = fit(&data, &state.priors, &state.tree, &opt, true).unwrap();
    let b = fit(&data, &state.priors, &state.tree, &opt, true).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn kl_only_fit_never_touches_crps() {
    let (data, state) = gp_toy(2);
    let opt = OptimizerConfig {
        max_steps: 50,
        ..OptimizerConfig::default()
    };
    let before = crps_evaluations();
    let res = fit(&data, &state.priors, &state.tree, &opt, false).unwrap();
    assert_eq!(crps_evaluations(), before);
    assert!(res.trace.iter().all(|e| e.crps.is_none()));
    fit(&data, &state.priors, &state.tree, &opt, true).unwrap();
    assert_eq!(crps_evaluations(), before + 50);
}

fn benchmark_data() -> (Dataset, ModelTree) {
    let names: Vec<String> = (0..4).map(|k| format!("base_{k}")).collect();
    let cols = tailfree::io::DataConfig {
        path: concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/benchmark_1d.csv").into(),
        features: vec!["x".into()],
        target: "y".into(),
        base_predictions: names.clone(),
    };
    let spec: tailfree::TreeSpec = serde_json::from_str(
        r#"{"smooth": ["base_0", "base_1"], "complex": ["base_2", "base_3"]}"#,
    )
    .unwrap();
    let tree = ModelTree::from_spec(&spec, &names).unwrap();
    (tailfree::io::load_dataset(&cols).unwrap(), tree)
}

#[test]
fn smoothed_trace_settles() {
    let (data, tree) = benchmark_data();
    let res = fit(&data, &PriorConfig::default(), &tree, &OptimizerConfig::default(), true).unwrap();
    let total: Vec<f64> = res.trace.iter().map(|e| e.total).collect();
    let w = 50;
    let blocks: Vec<(f64, f64)> = total[total.len() / 5..]
        .chunks(w)
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (v / n).sqrt())
        })
        .collect();
    for pair in blocks.windows(2) {
        let ((a, sa), (b, sb)) = (pair[0], pair[1]);
        assert!(b <= a + 4.0 * (sa * sa + sb * sb).sqrt(), "block mean rose from {a} to {b}");
    }
}
