//! Horseshoe prior over kernel weights.
//!
//! With `w_i² = τ² λ_i²`, the half-Cauchy scales are written as a double
//! inverse-Gamma hierarchy
//!
//! ```text
//! τ²  | φ_τ  ~ IG(½, 1/φ_τ),     φ_τ  ~ IG(½, A⁻²)
//! λ_i²| φ_λi ~ IG(½, 1/φ_λi),    φ_λi ~ IG(½, B⁻²)
//! ```
//!
//! and approximated by `q(τ²) = LogNormal(μ_τ, σ_τ²)`,
//! `q(λ_i²) = LogNormal(μ_λi, σ_λi²)`, `q(φ) = IG(s, r)`. The `q(φ)` factors
//! are never optimized by gradients; [`update_aux`] sets them to their
//! closed-form optimum after each step.
//!
//! `IG(α, β)` denotes shape `α`, scale `β`: density `β^α/Γ(α) x^{-α-1} e^{-β/x}`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Initial log-normal scale of every factor.
pub const INIT_SIGMA: f64 = 0.05;

/// Variational state of the Horseshoe weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorseshoeState {
    pub mu_tau: f64,
    pub sigma_tau: f64,
    pub mu_lambda: Vec<f64>,
    pub sigma_lambda: Vec<f64>,
    pub s_tau: f64,
    pub r_tau: f64,
    pub s_lambda: Vec<f64>,
    pub r_lambda: Vec<f64>,
    /// Global scale `A`.
    pub a: f64,
    /// Local scale `B`.
    pub b: f64,
}

impl HorseshoeState {
    /// Weights start near 1: all `μ = 0`, `σ = 0.05`, and `q(φ)` set by one
    /// [`update_aux`] pass.
    pub fn new(m: usize, a: f64, b: f64) -> Self {
        let state = HorseshoeState {
            mu_tau: 0.0,
            sigma_tau: INIT_SIGMA,
            mu_lambda: vec![0.0; m],
            sigma_lambda: vec![INIT_SIGMA; m],
            s_tau: 1.0,
            r_tau: 1.0,
            s_lambda: vec![1.0; m],
            r_lambda: vec![1.0; m],
            a,
            b,
        };
        update_aux(&state)
    }

    pub fn len(&self) -> usize {
        self.mu_lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_lambda.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        if self.sigma_lambda.len() != m || self.s_lambda.len() != m || self.r_lambda.len() != m {
            return Err(Error::Dimension("Horseshoe state vectors differ in length".into()));
        }
        let positives = [self.sigma_tau, self.s_tau, self.r_tau, self.a, self.b]
            .into_iter()
            .chain(self.sigma_lambda.iter().copied())
            .chain(self.s_lambda.iter().copied())
            .chain(self.r_lambda.iter().copied());
        for v in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("Horseshoe scale parameter {v} must be positive")));
            }
        }
        if !self.mu_tau.is_finite() || self.mu_lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Horseshoe location parameter".into()));
        }
        Ok(())
    }
}

/// Reparameterized weights `w_i = exp(μ_τ + μ_λi + ε_i (σ_τ + σ_λi))`.
pub fn sample_weights(state: &HorseshoeState, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != state.len() {
        return Err(Error::Dimension(format!("{} noise draws for {} weights", eps.len(), state.len())));
    }
    let w: Vec<f64> = (0..state.len())
        .map(|i| (state.mu_tau + state.mu_lambda[i] + eps[i] * (state.sigma_tau + state.sigma_lambda[i])).exp())
        .collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled weight overflowed".into()));
    }
    Ok(w)
}

/// Entropy of `LogNormal(μ, σ²)`: `μ + ½ log(2πeσ²)`.
pub fn lognormal_entropy(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("log-normal scale {sigma}")));
    }
    Ok(mu + 0.5 * (2.0 * PI * std::f64::consts::E * sigma * sigma).ln())
}

/// `(E[x⁻¹], E[log x])` under `LogNormal(μ, σ²)`.
pub fn lognormal_moments(mu: f64, sigma: f64) -> (f64, f64) {
    ((-mu + 0.5 * sigma * sigma).exp(), mu)
}

/// `(E[log φ], E[φ⁻¹])` under `IG(s, r)`.
pub fn invgamma_expectations(s: f64, r: f64) -> Result<(f64, f64)> {
    if !(s > 0.0 && r > 0.0) {
        return Err(Error::InvalidArgument(format!("inverse-Gamma parameters ({s}, {r})")));
    }
    Ok((r.ln() - digamma(s), s / r))
}

/// Entropy of `IG(s, r)`.
pub fn invgamma_entropy(s: f64, r: f64) -> f64 {
    s + r.ln() + ln_gamma(s) - (1.0 + s) * digamma(s)
}

/// Log density of `IG(shape, scale)` at `x`.
pub fn invgamma_log_density(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Log density of `LogNormal(μ, σ²)` at `x`.
pub fn lognormal_log_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let lx = x.ln();
    -lx - sigma.ln() - 0.5 * (2.0 * PI).ln() - (lx - mu).powi(2) / (2.0 * sigma * sigma)
}

/// KL of one scale block `q(x²) q(φ) ‖ p(x²|φ) p(φ)` with
/// `q(x²) = LogNormal(μ, σ²)`, `q(φ) = IG(s, r)`, `p(φ) = IG(½, scale⁻²)`.
pub fn kl_block(mu: f64, sigma: f64, s: f64, r: f64, scale: f64) -> Result<f64> {
    let (e_log_phi, e_inv_phi) = invgamma_expectations(s, r)?;
    let (e_inv_x, e_log_x) = lognormal_moments(mu, sigma);
    let lg_half = ln_gamma(0.5);
    let c = scale.powi(-2);
    let neg_entropy = -lognormal_entropy(mu, sigma)? - invgamma_entropy(s, r);
    let cross_x = -0.5 * e_log_phi - lg_half - 1.5 * e_log_x - e_inv_x * e_inv_phi;
    let cross_phi = 0.5 * c.ln() - lg_half - 1.5 * e_log_phi - c * e_inv_phi;
    Ok(neg_entropy - cross_x - cross_phi)
}

/// `KL(q(τ², φ_τ, λ², φ_λ) ‖ p(τ², φ_τ, λ², φ_λ))`.
pub fn kl_weights(state: &HorseshoeState) -> Result<f64> {
    state.validate()?;
    let mut kl = kl_block(state.mu_tau, state.sigma_tau, state.s_tau, state.r_tau, state.a)?;
    for i in 0..state.len() {
        kl += kl_block(state.mu_lambda[i], state.sigma_lambda[i], state.s_lambda[i], state.r_lambda[i], state.b)?;
    }
    Ok(kl)
}

/// Gradient of [`kl_block`] w.r.t. `(μ, σ)` at fixed `(s, r)`.
pub fn kl_block_grad(mu: f64, sigma: f64, s: f64, r: f64) -> (f64, f64) {
    let (e_inv_x, _) = lognormal_moments(mu, sigma);
    let e_inv_phi = s / r;
    (0.5 - e_inv_x * e_inv_phi, -1.0 / sigma + sigma * e_inv_x * e_inv_phi)
}

/// Closed-form optimum of the auxiliary factors:
/// `s = 1`, `r_τ = E[τ⁻²] + A⁻²`, `r_λi = E[λ_i⁻²] + B⁻²`.
pub fn update_aux(state: &HorseshoeState) -> HorseshoeState {
    let mut next = state.clone();
    next.s_tau = 1.0;
    next.r_tau = lognormal_moments(state.mu_tau, state.sigma_tau).0 + state.a.powi(-2);
    for i in 0..state.len() {
        next.s_lambda[i] = 1.0;
        next.r_lambda[i] = lognormal_moments(state.mu_lambda[i], state.sigma_lambda[i]).0 + state.b.powi(-2);
    }
    next
}

/// Reported weights: the log-normal median `exp(μ_τ + μ_λi)`.
pub fn weight_summary(state: &HorseshoeState) -> Vec<f64> {
    state.mu_lambda.iter().map(|ml| (state.mu_tau + ml).exp()).collect()
}

/// Draws `x` from the compound `φ ~ IG(½, scale⁻²)`, `x² | φ ~ IG(½, 1/φ)`,
/// which is half-Cauchy with the given scale.
pub fn sample_half_cauchy_compound<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    // IG(α, β) is the reciprocal of Gamma(α, rate β), i.e. Gamma scale 1/β.
    let phi = 1.0 / Gamma::new(0.5, scale * scale).expect("positive scale").sample(rng);
    let x2 = 1.0 / Gamma::new(0.5, phi).expect("positive phi").sample(rng);
    x2.sqrt()
}

/// CDF of the half-Cauchy distribution with the given scale.
pub fn half_cauchy_cdf(x: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        2.0 / PI * (x / scale).atan()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_weights() {
        let mut st = HorseshoeState::new(2, 1.0, 1.0);
        st.sigma_tau = 1e-300;
        st.sigma_lambda = vec![1e-300; 2];
        st.mu_tau = 0.3;
        st.mu_lambda = vec![0.2, -0.1];
        let w = sample_weights(&st, &[5.0, -5.0]).unwrap();
        assert!((w[0] - 0.5f64.exp()).abs() < 1e-12);
        assert!((w[1] - 0.2f64.exp()).abs() < 1e-12);
        st.mu_tau = 0.0;
        st.mu_lambda = vec![0.0; 2];
        assert_eq!(sample_weights(&st, &[0.7, 0.1]).unwrap(), vec![1.0, 1.0]);
        assert!(sample_weights(&st, &[0.0]).is_err());
        st.mu_tau = 800.0;
        assert!(matches!(sample_weights(&st, &[0.0, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn entropy_values() {
        let h = lognormal_entropy(0.0, 1.0).unwrap();
        assert!((h - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((lognormal_entropy(2.5, 0.3).unwrap() - lognormal_entropy(0.0, 0.3).unwrap() - 2.5).abs() < 1e-12);
        assert!(lognormal_entropy(0.0, 0.0).is_err());
    }

    #[test]
    fn moment_values() {
        assert_eq!(lognormal_moments(0.0, 0.0), (1.0, 0.0));
        let (inv, log) = lognormal_moments(1.0, 0.0);
        assert!((inv - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(log, 1.0);
    }

    #[test]
    fn invgamma_values() {
        let (el, ei) = invgamma_expectations(1.0, 1.0).unwrap();
        assert!((el - 0.577_215_664_901_532_9).abs() < 1e-10);
        assert_eq!(ei, 1.0);
        assert_eq!(invgamma_expectations(3.0, 4.0).unwrap().1, 0.5 * invgamma_expectations(3.0, 2.0).unwrap().1);
        assert!(invgamma_expectations(0.0, 1.0).is_err());
    }

    #[test]
    fn update_aux_values() {
        let mut st = HorseshoeState::new(1, 1.0, 1.0);
        st.sigma_tau = 1e-300;
        let up = update_aux(&st);
        assert!((up.r_tau - 2.0).abs() < 1e-12);
        assert_eq!(up.s_tau, 1.0);
        assert_eq!(update_aux(&up), up);
        assert_eq!(up.mu_tau, st.mu_tau);
        assert_eq!(up.sigma_lambda, st.sigma_lambda);
    }

    #[test]
    fn kl_assembly_identity() {
        let mut st = HorseshoeState::new(2, 1.5, 0.7);
        st.mu_lambda = vec![0.4, -1.2];
        st.sigma_lambda = vec![0.3, 0.9];
        let st = update_aux(&st);
        let total = kl_weights(&st).unwrap();
        let parts = kl_block(st.mu_tau, st.sigma_tau, st.s_tau, st.r_tau, st.a).unwrap()
            + kl_block(st.mu_lambda[0], st.sigma_lambda[0], st.s_lambda[0], st.r_lambda[0], st.b).unwrap()
            + kl_block(st.mu_lambda[1], st.sigma_lambda[1], st.s_lambda[1], st.r_lambda[1], st.b).unwrap();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn kl_grows_with_large_local_location() {
        let mut st = HorseshoeState::new(3, 1.0, 1.0);
        st.mu_lambda[1] = 3.0;
        let lo = kl_weights(&update_aux(&st)).unwrap();
        st.mu_lambda[1] = 6.0;
        let hi = kl_weights(&update_aux(&st)).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let (mu, sigma, s, r) = (0.3, 0.6, 1.0, 1.7);
        let (gm, gs) = kl_block_grad(mu, sigma, s, r);
        let h = 1e-6;
        let f = |m: f64, sg: f64| kl_block(m, sg, s, r, 1.0).unwrap();
        assert!(((f(mu + h, sigma) - f(mu - h, sigma)) / (2.0 * h) - gm).abs() < 1e-7);
        assert!(((f(mu, sigma + h) - f(mu, sigma - h)) / (2.0 * h) - gs).abs() < 1e-7);
    }

    #[test]
    fn summary_is_median() {
        let mut st = HorseshoeState::new(3, 1.0, 1.0);
        assert_eq!(weight_summary(&st), vec![1.0; 3]);
        st.mu_lambda = vec![0.5, -1.0, 2.0];
        let w = weight_summary(&st);
        assert!(w[2] > w[0] && w[0] > w[1]);
    }

    #[test]
    fn invalid_state_rejected() {
        let mut st = HorseshoeState::new(2, 1.0, 1.0);
        st.sigma_lambda[0] = 0.0;
        assert!(kl_weights(&st).is_err());
        let mut st = HorseshoeState::new(2, 1.0, 1.0);
        st.r_lambda.pop();
        assert!(st.validate().is_err());
    }
}
