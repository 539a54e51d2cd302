//! Dense factorization helpers shared by the exact and sparse models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter applied to noise-free Gram matrices before factorization.
pub const BASE_JITTER: f64 = 1e-6;

/// Jitter levels tried in order (relative to the mean diagonal).
pub const JITTER_LADDER: [f64; 3] = [1e-6, 1e-5, 1e-4];

/// A Cholesky factor together with the absolute jitter that was added.
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute amount added to the diagonal.
    pub jitter: f64,
    /// Relative level (multiplier of the mean diagonal) that succeeded.
    pub level: f64,
}

fn jitter_scale(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows().max(1) as f64;
    let mean = k.diagonal().iter().sum::<f64>() / n;
    if mean.is_finite() && mean > 0.0 {
        mean
    } else {
        1.0
    }
}

fn check_finite(k: &DMatrix<f64>, what: &str) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite entries")))
    }
}

/// Factorizes a noise-free Gram matrix, always adding at least `BASE_JITTER`
/// times its mean diagonal and escalating along `JITTER_LADDER`.
pub fn cholesky_jittered(k: &DMatrix<f64>) -> Result<JitteredCholesky> {
    check_finite(k, "Gram matrix")?;
    let scale = jitter_scale(k);
    for &level in JITTER_LADDER.iter() {
        let jitter = level * scale;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            return Ok(JitteredCholesky { chol, jitter, level });
        }
    }
    Err(Error::Factorization(format!("{}x{} Gram matrix", k.nrows(), k.ncols())))
}

/// Factorizes a matrix that is already regularized (e.g. `K + σ²I`). The
/// first attempt adds nothing; on failure the jitter ladder is used.
pub fn cholesky_regularized(k: &DMatrix<f64>) -> Result<JitteredCholesky> {
    check_finite(k, "covariance")?;
    if let Some(chol) = k.clone().cholesky() {
        return Ok(JitteredCholesky { chol, jitter: 0.0, level: 0.0 });
    }
    cholesky_jittered(k)
}

/// `log|A|` from a Cholesky factor of `A`.
pub fn logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn eigh_desc(k: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(k.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clamped to zero.
pub fn sqrtm_psd(k: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&roots) * v.transpose()
}

/// Largest absolute asymmetry `|K_ij - K_ji|`.
pub fn asymmetry(k: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..k.nrows() {
        for j in 0..i {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    worst
}

/// Frobenius inner product `Σ_ij A_ij B_ij`.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularized_skips_jitter_when_pd() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = cholesky_regularized(&k).unwrap();
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn jittered_recovers_singular_gram() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let f = cholesky_jittered(&k).unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let k = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(cholesky_jittered(&k), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sqrtm_squares_back() {
        let k = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrtm_psd(&k);
        assert!((&r * &r - &k).norm() < 1e-12);
    }

    #[test]
    fn eigh_sorted_descending() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (v, _) = eigh_desc(&k);
        assert_eq!(v.as_slice(), &[3.0, 2.0, 1.0]);
    }
}
