use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tailfree::gp::{
    cross_kernel, exact_gp_posterior, gram_matrix, rbf_kernel, sparse_gp_sample, InducingSet, KernelConfig,
    SparseGpPosterior,
};
use tailfree::linalg::Matrix;
use tailfree::rng::substream;
use rand::Rng;

fn cfg(l: f64, a: f64, j: f64) -> KernelConfig<f64> {
    KernelConfig::new(l, a, j).unwrap()
}

fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

fn random_points(n: usize, d: usize, seed: u64) -> Matrix<f64> {
    let mut rng = substream(seed, 0);
    Matrix::from_fn(n, d, |_, _| rng.gen::<f64>())
}

#[test]
fn rbf_examples() {
    let c = cfg(0.2, 1.0, 0.0);
    assert_eq!(rbf_kernel(&[0.0], &[0.0], &c), 1.0);
    assert!((rbf_kernel(&[0.0], &[0.2], &c) - 0.60653).abs() < 1e-5);
    let c2 = cfg(5.0, 2.0, 0.0);
    assert!((rbf_kernel(&[0.0, 0.0], &[3.0, 4.0], &c2) - 2.0 * (-0.5f64).exp()).abs() < 1e-14);
}

#[test]
fn gram_examples() {
    let one = gram_matrix(&Matrix::column(&[0.3]), &cfg(0.2, 1.0, 0.0)).unwrap();
    assert_eq!(one.as_slice(), &[1.0]);
    let two = gram_matrix(&Matrix::column(&[0.3, 0.3]), &cfg(0.2, 1.0, 1e-6)).unwrap();
    assert_eq!(two.as_slice(), &[1.0 + 1e-6, 1.0, 1.0, 1.0 + 1e-6]);
}

#[test]
fn gram_is_positive_definite() {
    for (n, d, seed) in [(3, 1, 0), (20, 1, 1), (20, 2, 2), (12, 3, 3)] {
        let k = gram_matrix(&random_points(n, d, seed), &cfg(0.3, 1.5, 1e-6)).unwrap();
        let eig = to_na(&k).symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0, "n={n} min eigenvalue {}", eig.eigenvalues.min());
    }
}

#[test]
fn prior_recovery() {
    let inducing = InducingSet::new(Matrix::column(&[0.0, 0.5, 1.0])).unwrap();
    let post = SparseGpPosterior::whitened_prior(inducing, cfg(0.3, 1.0, 1e-6));
    let query = Matrix::column(&[0.25, 0.5, 2.0]);
    let draws: Vec<Vec<f64>> = (0..4000).map(|s| sparse_gp_sample(&post, &query, false, s).unwrap()).collect();
    for j in 0..3 {
        let n = draws.len() as f64;
        let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n;
        let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (1.0 / n).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}

#[test]
fn degenerate_posterior_collapses_to_interpolant() {
    let locs = [0.0, 0.4, 1.0];
    let kernel = cfg(0.3, 1.0, 0.0);
    let inducing = InducingSet::new(Matrix::column(&locs)).unwrap();
    let mut post = SparseGpPosterior::whitened_prior(inducing, kernel);
    post.variational_mean = vec![0.5, -1.0, 2.0];
    for i in 0..3 {
        post.variational_cov_chol[(i, i)] = 1e-12;
    }
    // oracle: u = chol(K_uu) m
    let kuu = to_na(&cross_kernel(&Matrix::column(&locs), &Matrix::column(&locs), &kernel));
    let l = kuu.cholesky().unwrap().l();
    let u = &l * DVector::from_vec(post.variational_mean.clone());
    let query = Matrix::column(&locs);
    for seed in 0..5 {
        let exact = sparse_gp_sample(&post, &query, true, seed).unwrap();
        let spread = sparse_gp_sample(&post, &query, false, seed).unwrap();
        for j in 0..3 {
            assert!((exact[j] - u[j]).abs() < 1e-10);
            assert!((spread[j] - u[j]).abs() < 1e-2);
        }
    }
}

#[test]
fn far_query_has_prior_variance() {
    let inducing = InducingSet::new(Matrix::column(&[0.0])).unwrap();
    let mut post = SparseGpPosterior::whitened_prior(inducing, cfg(0.2, 2.0, 1e-6));
    post.variational_mean = vec![3.0];
    post.variational_cov_chol[(0, 0)] = 0.01;
    let query = Matrix::column(&[10.0]);
    let (_, cov) = post.predictive_moments(&query).unwrap();
    assert!((cov[(0, 0)] - 2.0).abs() < 1e-9);
    let v: Vec<f64> = (0..5000).map(|s| sparse_gp_sample(&post, &query, false, s).unwrap()[0]).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 2.0).abs() < 0.12, "var {var}");
}

#[test]
fn exact_posterior_without_data_is_prior() {
    let q = Matrix::column(&[0.1, 0.7]);
    let c = cfg(0.3, 1.2, 0.0);
    let (mean, cov) = exact_gp_posterior(&Matrix::zeros(0, 1), &[], 0.1, &c, &q).unwrap();
    assert_eq!(mean, vec![0.0, 0.0]);
    assert_eq!(cov, cross_kernel(&q, &q, &c));
}

#[test]
fn exact_posterior_interpolates_in_low_noise_limit() {
    let x = Matrix::column(&[0.2]);
    let (mean, _) = exact_gp_posterior(&x, &[1.7], 1e-10, &cfg(0.3, 1.0, 0.0), &x).unwrap();
    assert!((mean[0] - 1.7).abs() < 1e-8);
}

#[test]
fn exact_posterior_matches_dense_solve() {
    let x = random_points(5, 2, 9);
    let y = [0.3, -1.2, 0.8, 2.0, -0.4];
    let q = random_points(4, 2, 10);
    let c = cfg(0.4, 1.3, 0.0);
    let noise = 0.05;
    let (mean, cov) = exact_gp_posterior(&x, &y, noise, &c, &q).unwrap();

    let kxx = DMatrix::from_fn(5, 5, |i, j| rbf_kernel(x.row(i), x.row(j), &c) + if i == j { noise } else { 0.0 });
    let kqx = DMatrix::from_fn(4, 5, |i, j| rbf_kernel(q.row(i), x.row(j), &c));
    let kqq = DMatrix::from_fn(4, 4, |i, j| rbf_kernel(q.row(i), q.row(j), &c));
    let inv = kxx.try_inverse().unwrap();
    let m = &kqx * &inv * DVector::from_column_slice(&y);
    let s = &kqq - &kqx * &inv * kqx.transpose();
    for i in 0..4 {
        assert!((mean[i] - m[i]).abs() < 1e-10);
        for j in 0..4 {
            assert!((cov[(i, j)] - s[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn sparse_is_exact_with_inducing_at_training_inputs() {
    let xs = [0.05, 0.3, 0.45, 0.7, 0.95];
    let x = Matrix::column(&xs);
    let y = [0.4, -0.3, 1.1, 0.2, -0.8];
    let kernel = cfg(0.25, 1.0, 0.0);
    let noise = 0.1;
    let post = SparseGpPosterior::optimal_gaussian(InducingSet::new(x.clone()).unwrap(), kernel, &x, &y, noise).unwrap();
    let q = Matrix::column(&[0.0, 0.2, 0.5, 0.8, 1.3]);
    let (ms, cs) = post.predictive_moments(&q).unwrap();
    let (me, ce) = exact_gp_posterior(&x, &y, noise, &kernel, &q).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
    for i in 0..5 {
        assert!(rel(ms[i], me[i]) < 1e-6, "mean {} vs {}", ms[i], me[i]);
        assert!(rel(cs[(i, i)], ce[(i, i)]) < 1e-6, "var {} vs {}", cs[(i, i)], ce[(i, i)]);
    }
}

#[test]
fn seeded_sampling_is_bit_identical() {
    let inducing = InducingSet::new(Matrix::column(&[0.0, 0.5, 1.0])).unwrap();
    let post = SparseGpPosterior::whitened_prior(inducing, cfg(0.3, 1.0, 1e-6));
    let q = Matrix::column(&[0.1, 0.6, 0.9]);
    let a = sparse_gp_sample(&post, &q, false, 42).unwrap();
    let b = sparse_gp_sample(&post, &q, false, 42).unwrap();
    let c = sparse_gp_sample(&post, &q, false, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn empty_query_is_rejected() {
    let inducing = InducingSet::new(Matrix::column(&[0.0])).unwrap();
    let post = SparseGpPosterior::whitened_prior(inducing, cfg(0.3, 1.0, 1e-6));
    assert!(sparse_gp_sample(&post, &Matrix::zeros(0, 1), false, 0).is_err());
}

proptest! {
    #[test]
    fn kernel_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3),
                           l in 0.01f64..10.0, amp in 0.01f64..10.0) {
        let c = cfg(l, amp, 0.0);
        prop_assert_eq!(rbf_kernel(&a, &b, &c), rbf_kernel(&b, &a, &c));
        prop_assert_eq!(rbf_kernel(&a, &a, &c), amp);
    }

    #[test]
    fn gram_on_distinct_points_has_positive_spectrum(n in 1usize..=20, seed in 0u64..1000) {
        let pts = Matrix::from_fn(n, 1, |i, _| i as f64 / n as f64 + (seed % 7) as f64);
        let k = gram_matrix(&pts, &cfg(0.1, 1.0, 1e-6)).unwrap();
        prop_assert!(to_na(&k).symmetric_eigen().eigenvalues.min() > 0.0);
    }
}
