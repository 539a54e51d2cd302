//! Dense reference model: exact GP regression with a weighted-sum kernel,
//! prior sampling, and Gaussian divergences.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernel::{Covariance, KernelPool};
use crate::linalg::{self, cholesky_regularized};

/// A Gaussian over `T` function values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct PosteriorRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl Serialize for GaussianPosterior {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PosteriorRepr {
            mean: self.mean.as_slice().to_vec(),
            cov: self.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianPosterior {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PosteriorRepr::deserialize(d)?;
        let n = r.mean.len();
        if r.cov.len() != n || r.cov.iter().any(|row| row.len() != n) {
            return Err(serde::de::Error::custom("covariance shape does not match mean"));
        }
        Ok(GaussianPosterior {
            mean: DVector::from_vec(r.mean),
            cov: DMatrix::from_fn(n, n, |i, j| r.cov[i][j]),
        })
    }
}

impl GaussianPosterior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianPosterior { mean, cov })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// `k̃(x, x') = Σ_i w_i² k_i(x, x')` over a pool with nonnegative weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedKernel {
    pub pool: KernelPool,
    pub weights: Vec<f64>,
}

impl WeightedKernel {
    pub fn new(pool: KernelPool, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != pool.len() {
            return Err(Error::Dimension(format!("{} weights for a pool of {}", weights.len(), pool.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        pool.validate(None)?;
        Ok(WeightedKernel { pool, weights })
    }

    pub fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != b.ncols() {
            return Err(Error::Dimension(format!("column counts {} and {}", a.ncols(), b.ncols())));
        }
        self.pool.validate(Some(a.ncols()))?;
        let mut k = DMatrix::zeros(a.nrows(), b.nrows());
        for (m, w) in self.pool.members.iter().zip(&self.weights) {
            if *w != 0.0 {
                k += m.gram(a, b) * (w * w);
            }
        }
        Ok(k)
    }
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} inputs and {} targets", x.nrows(), y.len())));
    }
    if !(noise.is_finite() && noise > 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance {noise}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data".into()));
    }
    Ok(())
}

fn noisy_gram(wk: &WeightedKernel, x: &DMatrix<f64>, noise: f64) -> Result<DMatrix<f64>> {
    let mut k = wk.gram(x, x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    Ok(k)
}

/// Latent-function posterior at `xs` (observation noise excluded).
pub fn exact_posterior(
    wk: &WeightedKernel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: f64,
    xs: &DMatrix<f64>,
) -> Result<GaussianPosterior> {
    check_data(x, y, noise)?;
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("test inputs".into()));
    }
    let chol = cholesky_regularized(&noisy_gram(wk, x, noise)?)?.chol;
    let ksx = wk.gram(xs, x)?;
    let alpha = chol.solve(y);
    let mean = &ksx * alpha;
    let v = chol.l().solve_lower_triangular(&ksx.transpose()).expect("triangular factor");
    let cov = wk.gram(xs, xs)? - v.transpose() * v;
    GaussianPosterior::new(mean, cov)
}

/// `log N(y | 0, K̃ + σ²I)`.
pub fn log_marginal_likelihood(wk: &WeightedKernel, x: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> Result<f64> {
    check_data(x, y, noise)?;
    let chol = cholesky_regularized(&noisy_gram(wk, x, noise)?)?.chol;
    let alpha = chol.solve(y);
    let n = y.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * linalg::logdet(&chol) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// One draw from `N(0, K̃ + σ²I)` at `x`, deterministic in `seed`.
pub fn sample_gp(wk: &WeightedKernel, x: &DMatrix<f64>, noise: f64, seed: u64) -> Result<DVector<f64>> {
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise variance {noise}")));
    }
    let k = wk.gram(x, x)? + DMatrix::identity(x.nrows(), x.nrows()) * noise;
    let chol = if noise > 0.0 { cholesky_regularized(&k)? } else { linalg::cholesky_jittered(&k)? };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(x.nrows(), |_, _| StandardNormal.sample(&mut rng));
    Ok(chol.chol.l() * z)
}

fn check_pair(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("Gaussians of dimension {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// Closed-form 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussian(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<f64> {
    check_pair(p, q)?;
    if p.cov.iter().chain(q.cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance in W2".into()));
    }
    let mean_term = (&p.mean - &q.mean).norm_squared();
    let rq = linalg::sqrtm_psd(&q.cov);
    let cross = linalg::sqrtm_psd(&(&rq * &p.cov * &rq));
    let tr = p.cov.trace() + q.cov.trace() - 2.0 * cross.trace();
    Ok((mean_term + tr).max(0.0).sqrt())
}

/// `KL(P ‖ Q)` between multivariate Gaussians.
pub fn kl_gaussian(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<f64> {
    check_pair(p, q)?;
    let lq = q
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("singular Q covariance in KL".into()))?;
    let lp = cholesky_regularized(&p.cov)?.chol;
    let k = p.len() as f64;
    let diff = &q.mean - &p.mean;
    let tr = lq.solve(&p.cov).trace();
    let maha = diff.dot(&lq.solve(&diff));
    Ok(0.5 * (tr + maha - k + linalg::logdet(&lq) - linalg::logdet(&lp)))
}

/// The `count` largest eigenvalues of a symmetric matrix, descending.
pub fn top_eigenvalues(k: &DMatrix<f64>, count: usize) -> Result<DVector<f64>> {
    if k.nrows() != k.ncols() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", k.nrows(), k.ncols())));
    }
    let scale = k.amax().max(1.0);
    if linalg::asymmetry(k) > 1e-10 * scale {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let (vals, _) = linalg::eigh_desc(&((k + k.transpose()) * 0.5));
    Ok(vals.rows(0, count.min(vals.len())).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{BaseKernel, KernelExpr};

    fn se_kernel(l: f64) -> WeightedKernel {
        WeightedKernel::new(KernelPool::new(vec![KernelExpr::single(BaseKernel::se(l))]), vec![1.0]).unwrap()
    }

    fn scalar(m: f64, v: f64) -> GaussianPosterior {
        GaussianPosterior::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap()
    }

    #[test]
    fn interpolation_limit() {
        let x = DMatrix::from_element(1, 1, 0.3);
        let y = DVector::from_element(1, 1.7);
        let p = exact_posterior(&se_kernel(1.0), &x, &y, 1e-10, &x).unwrap();
        assert!((p.mean[0] - 1.7).abs() < 1e-8);
        assert!(p.cov[(0, 0)].abs() < 1e-8);
    }

    #[test]
    fn prior_reversion_far_away() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 0.5]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let xs = DMatrix::from_element(1, 1, 100.0);
        let p = exact_posterior(&se_kernel(1.0), &x, &y, 0.1, &xs).unwrap();
        assert!(p.mean[0].abs() < 1e-12);
        assert!((p.cov[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lml_of_zero_kernel() {
        let zero = WeightedKernel::new(KernelPool::new(vec![KernelExpr::single(BaseKernel::se(1.0))]), vec![0.0]).unwrap();
        let x = DMatrix::from_element(1, 1, 0.0);
        let v = log_marginal_likelihood(&zero, &x, &DVector::from_element(1, 0.0), 1.0).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn w2_scalar_cases() {
        assert!(w2_gaussian(&scalar(0.0, 1.0), &scalar(0.0, 1.0)).unwrap().abs() < 1e-12);
        assert!((w2_gaussian(&scalar(0.0, 1.0), &scalar(3.0, 1.0)).unwrap() - 3.0).abs() < 1e-12);
        assert!((w2_gaussian(&scalar(0.0, 1.0), &scalar(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_scalar_cases() {
        assert!(kl_gaussian(&scalar(0.2, 1.3), &scalar(0.2, 1.3)).unwrap().abs() < 1e-14);
        assert!((kl_gaussian(&scalar(1.0, 1.0), &scalar(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-14);
        assert!(kl_gaussian(&scalar(1.0, 1.0), &scalar(0.0, 0.0)).is_err());
    }

    #[test]
    fn eigen_cases() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(top_eigenvalues(&i3, 2).unwrap().as_slice(), &[1.0, 1.0]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        assert_eq!(top_eigenvalues(&d, 2).unwrap().as_slice(), &[3.0, 2.0]);
        let ns = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(top_eigenvalues(&ns, 1).is_err());
    }

    #[test]
    fn input_errors() {
        let x = DMatrix::from_element(2, 1, 0.0);
        let y = DVector::from_element(3, 0.0);
        assert!(exact_posterior(&se_kernel(1.0), &x, &y, 0.1, &x).is_err());
        let y = DVector::from_vec(vec![0.0, f64::NAN]);
        assert!(matches!(log_marginal_likelihood(&se_kernel(1.0), &x, &y, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn posterior_json_shape() {
        let p = scalar(0.5, 2.0);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v, serde_json::json!({"mean": [0.5], "cov": [[2.0]]}));
        let back: GaussianPosterior = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
