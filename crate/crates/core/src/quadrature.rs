//! Gauss–Hermite quadrature for Gaussian expectations.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights for `∫ e^{-t²} f(t) dt ≈ Σ w_k f(t_k)`, computed with
/// the Golub–Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[f(F)]` for `F ~ N(mean, var)` using the given rule.
pub fn normal_expectation(rule: &(Vec<f64>, Vec<f64>), mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
    let sd = (2.0 * var.max(0.0)).sqrt();
    let norm = std::f64::consts::PI.sqrt();
    rule.0.iter().zip(&rule.1).map(|(t, w)| w * f(mean + sd * t)).sum::<f64>() / norm
}
