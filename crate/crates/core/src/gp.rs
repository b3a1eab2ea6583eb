//! RBF kernels, Gaussian-process priors and the whitened inducing-point
//! (sparse) variational posterior shared by every GP in the ensemble.
//!
//! The sparse posterior is parameterized on the prior-whitened inducing
//! values `v`, with `u = L v` and `L L^T = K(Z, Z)`. Under `q(v) = N(m, S S^T)`
//! the process at query points `X` has
//!
//! ```text
//! mean = A m,   cov = A S S^T A^T + K(X, X) - A A^T,   A = K(X, Z) L^{-T}.
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_solve, dot, lower_inverse, right_solve_lower_transpose, Matrix,
};
use crate::rng::{std_normal_vec, substream};
use crate::scalar::Scalar;

/// Relative jitter the Cholesky escalation starts from, as a fraction of the amplitude.
pub const JITTER_START: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig<T> {
    pub lengthscale: T,
    /// Variance scale (the kernel value at zero distance).
    pub amplitude: T,
    /// Diagonal added to every Gram matrix.
    pub jitter: T,
}

impl<T: Scalar> KernelConfig<T> {
    pub fn new(lengthscale: T, amplitude: T, jitter: T) -> Result<Self> {
        let cfg = Self {
            lengthscale,
            amplitude,
            jitter,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > T::zero()) || !self.lengthscale.is_finite() {
            return Err(Error::invalid(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.amplitude > T::zero()) || !self.amplitude.is_finite() {
            return Err(Error::invalid(format!(
                "kernel amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if !(self.jitter >= T::zero()) {
            return Err(Error::invalid(format!(
                "kernel jitter must be non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    pub fn with_lengthscale(&self, lengthscale: T) -> Self {
        Self {
            lengthscale,
            ..*self
        }
    }

    #[inline]
    pub fn eval(&self, x: &[T], x2: &[T]) -> T {
        let d2 = x
            .iter()
            .zip(x2)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        self.amplitude * (-d2 / (T::lit(2.0) * self.lengthscale * self.lengthscale)).exp()
    }

    fn jitter_range(&self) -> (T, T) {
        (
            T::lit(JITTER_START) * self.amplitude,
            T::lit(JITTER_MAX) * self.amplitude,
        )
    }
}

/// `amplitude * exp(-|x - x2|^2 / (2 lengthscale^2))`
pub fn rbf_kernel<T: Scalar>(x: &[T], x2: &[T], cfg: &KernelConfig<T>) -> T {
    cfg.eval(x, x2)
}

/// Kernel matrix between the rows of `a` and the rows of `b` (no jitter).
pub fn cross_kernel<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, cfg: &KernelConfig<T>) -> Matrix<T> {
    Matrix::from_fn(a.rows(), b.rows(), |i, j| cfg.eval(a.row(i), b.row(j)))
}

/// `K[i][j] = k(p_i, p_j) + jitter * 1{i = j}`. Fails if the result cannot be
/// Cholesky-factorized even after escalating the jitter.
pub fn gram_matrix<T: Scalar>(points: &Matrix<T>, cfg: &KernelConfig<T>) -> Result<Matrix<T>> {
    if points.rows() == 0 {
        return Err(Error::invalid("gram_matrix needs at least one point"));
    }
    let k = raw_gram(points, cfg);
    let (start, max) = cfg.jitter_range();
    k.cholesky_jittered(start, max)?;
    Ok(k)
}

/// Lower Cholesky factor of the (jittered) Gram matrix.
pub fn gram_cholesky<T: Scalar>(points: &Matrix<T>, cfg: &KernelConfig<T>) -> Result<Matrix<T>> {
    let k = raw_gram(points, cfg);
    let (start, max) = cfg.jitter_range();
    Ok(k.cholesky_jittered(start, max)?.0)
}

fn raw_gram<T: Scalar>(points: &Matrix<T>, cfg: &KernelConfig<T>) -> Matrix<T> {
    let n = points.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = cfg.amplitude + cfg.jitter;
        for j in 0..i {
            let v = cfg.eval(points.row(i), points.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPrior<T> {
    pub kernel: KernelConfig<T>,
    pub mean: T,
}

impl<T: Scalar> GpPrior<T> {
    pub fn zero_mean(kernel: KernelConfig<T>) -> Self {
        Self {
            kernel,
            mean: T::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet<T> {
    locations: Matrix<T>,
}

impl<T: Scalar> InducingSet<T> {
    pub fn new(locations: Matrix<T>) -> Result<Self> {
        if locations.rows() == 0 {
            return Err(Error::invalid("inducing set must contain at least one point"));
        }
        for i in 0..locations.rows() {
            for j in 0..i {
                let d2: T = locations
                    .row(i)
                    .iter()
                    .zip(locations.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if !(d2 > T::zero()) {
                    return Err(Error::invalid(format!(
                        "inducing locations {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { locations })
    }

    /// Uniform grid over the bounding box of `points` with at most
    /// `min(n, max_count)` locations. In `d` dimensions each axis gets
    /// `floor(count^(1/d))` knots; axes with zero extent get one.
    pub fn grid_over(points: &Matrix<T>, max_count: usize) -> Result<Self> {
        let n = points.rows();
        let d = points.cols();
        if n == 0 || d == 0 || max_count == 0 {
            return Err(Error::invalid("cannot place inducing points on an empty input set"));
        }
        let count = n.min(max_count);
        let mut lo = points.row(0).to_vec();
        let mut hi = lo.clone();
        for i in 1..n {
            for (k, &v) in points.row(i).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let active = (0..d).filter(|&k| hi[k] > lo[k]).count().max(1);
        let per_axis = if active == 1 {
            count
        } else {
            let mut g = (count as f64).powf(1.0 / active as f64).floor() as usize;
            while (g + 1).pow(active as u32) <= count {
                g += 1;
            }
            g.max(1)
        };
        let axes: Vec<Vec<T>> = (0..d)
            .map(|k| {
                if hi[k] > lo[k] && per_axis > 1 {
                    let step = (hi[k] - lo[k]) / T::lit((per_axis - 1) as f64);
                    (0..per_axis)
                        .map(|j| lo[k] + step * T::lit(j as f64))
                        .collect()
                } else if hi[k] > lo[k] {
                    vec![(lo[k] + hi[k]) / T::lit(2.0)]
                } else {
                    vec![lo[k]]
                }
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut rows = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = Vec::with_capacity(d);
            for axis in axes.iter().rev() {
                p.push(axis[rem % axis.len()]);
                rem /= axis.len();
            }
            p.reverse();
            rows.push(p);
        }
        Self::new(Matrix::from_rows(&rows)?)
    }

    pub fn count(&self) -> usize {
        self.locations.rows()
    }

    pub fn locations(&self) -> &Matrix<T> {
        &self.locations
    }
}

/// `A = K(X, Z) L^{-T}` together with the conditional prior variance
/// `k(x, x) - |A_x|^2` of the process at each query point given `u`.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub weights: Matrix<T>,
    pub conditional_var: Vec<T>,
}

impl<T: Scalar> Projection<T> {
    /// Process values `A v` for whitened inducing values `v`.
    pub fn apply(&self, v: &[T]) -> Vec<T> {
        self.weights.matvec(v)
    }
}

pub fn whitened_projection<T: Scalar>(
    inducing: &InducingSet<T>,
    kernel: &KernelConfig<T>,
    query: &Matrix<T>,
) -> Result<Projection<T>> {
    let l = gram_cholesky(inducing.locations(), kernel)?;
    let kxz = cross_kernel(query, inducing.locations(), kernel);
    let weights = right_solve_lower_transpose(&kxz, &l);
    let conditional_var = (0..query.rows())
        .map(|i| {
            let a = weights.row(i);
            (kernel.amplitude - dot(a, a)).max(T::zero())
        })
        .collect();
    Ok(Projection {
        weights,
        conditional_var,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGpPosterior<T> {
    pub inducing: InducingSet<T>,
    /// Mean of the whitened inducing values.
    pub variational_mean: Vec<T>,
    /// Lower-triangular Cholesky factor of the whitened covariance.
    pub variational_cov_chol: Matrix<T>,
    pub kernel: KernelConfig<T>,
}

impl<T: Scalar> SparseGpPosterior<T> {
    /// The variational posterior equal to the prior: `v ~ N(0, I)`.
    pub fn whitened_prior(inducing: InducingSet<T>, kernel: KernelConfig<T>) -> Self {
        let m = inducing.count();
        Self {
            inducing,
            variational_mean: vec![T::zero(); m],
            variational_cov_chol: Matrix::identity(m),
            kernel,
        }
    }

    pub fn count(&self) -> usize {
        self.inducing.count()
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let m = self.count();
        let s = &self.variational_cov_chol;
        if self.variational_mean.len() != m || s.rows() != m || s.cols() != m {
            return Err(Error::invalid("sparse GP parameter shapes disagree with inducing set"));
        }
        for i in 0..m {
            if !(s[(i, i)] > T::zero()) {
                return Err(Error::invalid(
                    "variational Cholesky factor needs a strictly positive diagonal",
                ));
            }
            for j in (i + 1)..m {
                if s[(i, j)] != T::zero() {
                    return Err(Error::invalid("variational Cholesky factor must be lower-triangular"));
                }
            }
        }
        if !s.is_finite() || self.variational_mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite variational parameters"));
        }
        Ok(())
    }

    /// Optimal variational posterior for a Gaussian likelihood with noise
    /// variance `noise_var` on observations `(train_x, train_y)`.
    pub fn optimal_gaussian(
        inducing: InducingSet<T>,
        kernel: KernelConfig<T>,
        train_x: &Matrix<T>,
        train_y: &[T],
        noise_var: T,
    ) -> Result<Self> {
        let proj = whitened_projection(&inducing, &kernel, train_x)?;
        let a = &proj.weights;
        let m = inducing.count();
        let inv_noise = T::one() / noise_var;
        // precision = I + A^T A / noise_var
        let mut prec = a.transpose().matmul(a);
        for x in prec.as_mut_slice() {
            *x = *x * inv_noise;
        }
        prec.add_diagonal(T::one());
        let r = prec.cholesky()?;
        let aty: Vec<T> = a.tr_matvec(train_y).into_iter().map(|x| x * inv_noise).collect();
        let mean = cholesky_solve(&r, &aty);
        let r_inv = lower_inverse(&r);
        let cov = r_inv.transpose().matmul(&r_inv);
        let chol = cov.cholesky_jittered(T::lit(1e-12), T::lit(1e-6))?.0;
        debug_assert_eq!(chol.rows(), m);
        Ok(Self {
            inducing,
            variational_mean: mean,
            variational_cov_chol: chol,
            kernel,
        })
    }

    /// Predictive mean and covariance of the process at `query`.
    pub fn predictive_moments(&self, query: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
        let proj = whitened_projection(&self.inducing, &self.kernel, query)?;
        let a = &proj.weights;
        let mean = a.matvec(&self.variational_mean);
        let as_ = a.matmul(&self.variational_cov_chol);
        let kqq = cross_kernel(query, query, &self.kernel);
        let n = query.rows();
        let cov = Matrix::from_fn(n, n, |i, j| {
            dot(as_.row(i), as_.row(j)) + kqq[(i, j)] - dot(a.row(i), a.row(j))
        });
        Ok((mean, cov))
    }

    /// One joint draw of the process at `query`. With `noise_free` the draw is
    /// the projection `A v` only; otherwise the conditional spread of the
    /// process given the inducing values is added as well.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        query: &Matrix<T>,
        noise_free: bool,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        if query.rows() == 0 {
            return Err(Error::invalid("sparse GP sample needs at least one query point"));
        }
        let m = self.count();
        let xi: Vec<T> = std_normal_vec(rng, m);
        let v: Vec<T> = self
            .variational_cov_chol
            .matvec(&xi)
            .into_iter()
            .zip(&self.variational_mean)
            .map(|(a, &b)| a + b)
            .collect();
        let proj = whitened_projection(&self.inducing, &self.kernel, query)?;
        let mut f = proj.apply(&v);
        if !noise_free {
            let a = &proj.weights;
            let n = query.rows();
            let kqq = cross_kernel(query, query, &self.kernel);
            let cond = Matrix::from_fn(n, n, |i, j| kqq[(i, j)] - dot(a.row(i), a.row(j)));
            let (start, max) = self.kernel.jitter_range();
            let (lc, _) = cond.cholesky_jittered(start, max)?;
            let eta: Vec<T> = std_normal_vec(rng, n);
            for (fi, e) in f.iter_mut().zip(lc.matvec(&eta)) {
                *fi = *fi + e;
            }
        }
        Ok(f)
    }
}

/// Seeded joint sample of a sparse GP at `query`; bit-identical for equal seeds.
pub fn sparse_gp_sample<T: Scalar>(
    post: &SparseGpPosterior<T>,
    query: &Matrix<T>,
    noise_free: bool,
    seed: u64,
) -> Result<Vec<T>> {
    post.validate()?;
    let mut rng = substream(seed, 0);
    post.sample(query, noise_free, &mut rng)
}

/// Exact GP regression posterior (zero prior mean) at `query`.
pub fn exact_gp_posterior<T: Scalar>(
    train_x: &Matrix<T>,
    train_y: &[T],
    noise_var: T,
    cfg: &KernelConfig<T>,
    query: &Matrix<T>,
) -> Result<(Vec<T>, Matrix<T>)> {
    if !(noise_var > T::zero()) {
        return Err(Error::invalid("exact GP posterior needs a positive noise variance"));
    }
    if train_x.rows() != train_y.len() {
        return Err(Error::invalid("training inputs and targets differ in length"));
    }
    let kqq = cross_kernel(query, query, cfg);
    if train_x.rows() == 0 {
        return Ok((vec![T::zero(); query.rows()], kqq));
    }
    let mut k = cross_kernel(train_x, train_x, cfg);
    k.add_diagonal(noise_var);
    let l = k.cholesky()?;
    let alpha = cholesky_solve(&l, train_y);
    let kqx = cross_kernel(query, train_x, cfg);
    let mean = kqx.matvec(&alpha);
    let w = right_solve_lower_transpose(&kqx, &l);
    let n = query.rows();
    let cov = Matrix::from_fn(n, n, |i, j| kqq[(i, j)] - dot(w.row(i), w.row(j)));
    Ok((mean, cov))
}
