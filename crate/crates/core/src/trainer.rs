//! ELBO assembly, reparameterized gradients and the stochastic training loop.
//!
//! Gradients are hand-derived adjoints of the per-group quantities
//!
//! ```text
//! A = K̂⁻¹ K_uf,  B = Lᵀ A,  proj = Aᵀ m,  core = diag K_ff − diag(K_fu A) + ‖B_·j‖²
//! μ = Σ_i w_i proj_i,   v = Σ_i w_i² core_i
//! ```
//!
//! where `K̂ = K_uu + cI` carries the (fixed-level) relative jitter. The
//! likelihood only sees `(μ, v)`, so every model reduces to `∂ELL/∂μ` and
//! `∂ELL/∂v` followed by the group backward pass.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::horseshoe::{kl_block_grad, kl_weights, sample_weights, update_aux};
use crate::kernel::Covariance;
use crate::linalg::cholesky_jittered;
use crate::multisvgp::{InducingGroup, Likelihood, MultiSvgp, SvgpBaseline, Weights};
use crate::quadrature::gauss_hermite;

/// Number of Gauss–Hermite nodes for non-Gaussian likelihoods.
pub const QUADRATURE_NODES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LikelihoodKind {
    Gaussian,
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mc_samples_eval: usize,
    /// Initial noise variance; `None` means `0.1 · var(y)`.
    pub noise_init: Option<f64>,
    pub optimize_inducing: bool,
    pub optimize_hyperparameters: bool,
    pub optimize_weights: bool,
    pub optimize_noise: bool,
    pub likelihood: LikelihoodKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            iterations: 1000,
            batch_size: 256,
            learning_rate: 0.01,
            seed: 0,
            mc_samples_eval: 16,
            noise_init: None,
            optimize_inducing: true,
            optimize_hyperparameters: true,
            optimize_weights: true,
            optimize_noise: true,
            likelihood: LikelihoodKind::Gaussian,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!("batch size {} for {n} points", self.batch_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.mc_samples_eval == 0 {
            return Err(Error::Config("mc_samples_eval must be at least 1".into()));
        }
        if let Some(v) = self.noise_init {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("initial noise variance {v}")));
            }
        }
        Ok(())
    }

    pub fn mask(&self) -> ParamMask {
        ParamMask {
            inducing: self.optimize_inducing,
            hyperparameters: self.optimize_hyperparameters,
            weights: self.optimize_weights,
            noise: self.optimize_noise,
        }
    }

    /// `noise_init`, or `0.1 · var(y)` (floored to stay positive).
    pub fn initial_noise(&self, y: &DVector<f64>) -> f64 {
        self.noise_init.unwrap_or_else(|| {
            let n = y.len().max(1) as f64;
            let mean = y.mean();
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (0.1 * var).max(1e-6)
        })
    }
}

/// Which parameter blocks are trainable. Variational parameters
/// `(m_i, L_i)` always are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamMask {
    pub inducing: bool,
    pub hyperparameters: bool,
    pub weights: bool,
    pub noise: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask { inducing: true, hyperparameters: true, weights: true, noise: true };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    pub kl_inducing: f64,
    pub kl_weights: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    fn new(expected_loglik: f64, kl_inducing: f64, kl_weights: f64) -> Self {
        ElboBreakdown { expected_loglik, kl_inducing, kl_weights, elbo: expected_loglik - kl_inducing - kl_weights }
    }
}

/// A minibatch with its likelihood scale `N / b`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub scale: f64,
}

impl Batch {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, n_total: usize) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(Error::Dimension(format!("batch with {} inputs and {} targets", x.nrows(), y.len())));
        }
        let scale = n_total as f64 / y.len() as f64;
        Ok(Batch { x, y, scale })
    }

    pub fn full(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        Batch::new(x.clone(), y.clone(), y.len())
    }

    fn select(x: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> Self {
        let bx = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
        let by = DVector::from_fn(idx.len(), |r, _| y[idx[r]]);
        Batch { x: bx, y: by, scale: y.len() as f64 / idx.len() as f64 }
    }
}

fn check_moments(mu: &DVector<f64>, v: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
    if mu.len() != v.len() || mu.len() != y.len() {
        return Err(Error::Dimension("mean, variance and target lengths differ".into()));
    }
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidArgument("negative predictive variance".into()));
    }
    Ok(())
}

/// Value and `(∂/∂μ, ∂/∂v, ∂/∂log σ²)` of the Gaussian expected log-likelihood.
fn gaussian_ell(mu: &DVector<f64>, v: &DVector<f64>, y: &DVector<f64>, noise: f64, scale: f64)
    -> (f64, DVector<f64>, DVector<f64>, f64) {
    let mut val = 0.0;
    let mut dlog_noise = 0.0;
    let c = -0.5 * (2.0 * PI * noise).ln();
    let mut gmu = DVector::zeros(mu.len());
    for j in 0..mu.len() {
        let r = y[j] - mu[j];
        let q = (r * r + v[j]) / (2.0 * noise);
        val += c - q;
        dlog_noise += -0.5 + q;
        gmu[j] = scale * r / noise;
    }
    let gv = DVector::from_element(mu.len(), -scale / (2.0 * noise));
    (scale * val, gmu, gv, scale * dlog_noise)
}

/// `scale · Σ_j E_{f~N(μ_j, v_j)}[log N(y_j | f, σ_n²)]`.
pub fn expected_loglik_gaussian(mu: &DVector<f64>, v: &DVector<f64>, y: &DVector<f64>, noise: f64, scale: f64) -> Result<f64> {
    check_moments(mu, v, y)?;
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance {noise}")));
    }
    Ok(gaussian_ell(mu, v, y, noise, scale).0)
}

fn check_binary(y: &DVector<f64>) -> Result<()> {
    if y.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return Err(Error::InvalidArgument("classification targets must be 0 or 1".into()));
    }
    Ok(())
}

fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Value and `(∂/∂μ, ∂/∂v)` of the logistic expected log-likelihood. The
/// variance derivative uses `∂E[g(f)]/∂v = ½ E[g''(f)]`.
fn bernoulli_ell(mu: &DVector<f64>, v: &DVector<f64>, y: &DVector<f64>, scale: f64) -> (f64, DVector<f64>, DVector<f64>) {
    let (nodes, weights) = gauss_hermite(QUADRATURE_NODES);
    let norm = PI.sqrt();
    let mut val = 0.0;
    let mut gmu = DVector::zeros(mu.len());
    let mut gv = DVector::zeros(mu.len());
    for j in 0..mu.len() {
        let s = 2.0 * y[j] - 1.0;
        let sd = (2.0 * v[j]).sqrt();
        let (mut e0, mut e1, mut e2) = (0.0, 0.0, 0.0);
        for (t, w) in nodes.iter().zip(&weights) {
            let f = mu[j] + sd * t;
            let p = sigmoid(s * f);
            e0 += w * log_sigmoid(s * f);
            e1 += w * s * (1.0 - p);
            e2 += w * -p * (1.0 - p);
        }
        val += e0 / norm;
        gmu[j] = scale * e1 / norm;
        gv[j] = scale * 0.5 * e2 / norm;
    }
    (scale * val, gmu, gv)
}

/// `scale · Σ_j E_{f~N(μ_j, v_j)}[log σ((2y_j − 1) f)]` by 20-node Gauss–Hermite.
pub fn expected_loglik_bernoulli(mu: &DVector<f64>, v: &DVector<f64>, y: &DVector<f64>, scale: f64) -> Result<f64> {
    check_moments(mu, v, y)?;
    check_binary(y)?;
    Ok(bernoulli_ell(mu, v, y, scale).0)
}

/// Forward quantities of one inducing group on a batch.
struct GroupForward {
    chol: Cholesky<f64, Dyn>,
    level: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    proj: DVector<f64>,
    core: DVector<f64>,
    kl: f64,
}

fn group_forward(cov: &dyn Covariance, g: &InducingGroup, x: &DMatrix<f64>) -> Result<GroupForward> {
    let jc = cholesky_jittered(&cov.gram(&g.z, &g.z))?;
    let chol = jc.chol;
    let kuf = cov.gram(&g.z, x);
    let a = chol.solve(&kuf);
    let b = g.chol.transpose() * &a;
    let proj = a.transpose() * &g.mean;
    let kff = cov.diag(x);
    let core = DVector::from_fn(x.nrows(), |j, _| {
        kff[j] - kuf.column(j).dot(&a.column(j)) + b.column(j).norm_squared()
    });
    let kl = crate::multisvgp::gaussian_kl_to_prior(&chol, g);
    Ok(GroupForward { chol, level: jc.level, a, b, proj, core, kl })
}

/// Gradients of `ELL − KL` for one group.
struct GroupGrad {
    dm: DVector<f64>,
    /// Lower triangle of `∂/∂L`.
    dl: DMatrix<f64>,
    dz: DMatrix<f64>,
    dtheta: Vec<f64>,
    dw: f64,
}

/// Backward pass given `gμ = ∂ELL/∂μ`, `gv = ∂ELL/∂v` and the outer weight `w`.
fn group_backward(
    cov: &dyn Covariance,
    g: &InducingGroup,
    x: &DMatrix<f64>,
    f: &GroupForward,
    w: f64,
    gmu: &DVector<f64>,
    gv: &DVector<f64>,
    want_z: bool,
    want_theta: bool,
) -> GroupGrad {
    let m = g.size();
    let a_vec = gmu * w;
    let b_vec = gv * (w * w);
    let dw = gmu.dot(&f.proj) + 2.0 * w * gv.dot(&f.core);

    let kinv = f.chol.inverse();
    let alpha = f.chol.solve(&g.mean);
    // A diag(b)
    let mut a_b = f.a.clone();
    for (j, mut col) in a_b.column_iter_mut().enumerate() {
        col *= b_vec[j];
    }
    let dm = &f.a * &a_vec - &alpha;

    let mut dl = (&a_b * f.b.transpose()) * 2.0 - &kinv * &g.chol;
    for i in 0..m {
        dl[(i, i)] += 1.0 / g.chol[(i, i)];
        for j in i + 1..m {
            dl[(i, j)] = 0.0;
        }
    }

    let mut dz = DMatrix::zeros(m, x.ncols());
    let mut dtheta = vec![0.0; cov.n_params()];
    if want_z || want_theta {
        // Ḡ_A = m aᵀ + 2 L B diag(b)
        let mut b_b = f.b.clone();
        for (j, mut col) in b_b.column_iter_mut().enumerate() {
            col *= b_vec[j];
        }
        let gbar = &g.mean * a_vec.transpose() + (&g.chol * b_b) * 2.0;
        let kg = f.chol.solve(&gbar);
        let g_uf = &kg - &a_b * 2.0;
        let s = g.covariance();
        let mut g_uu = -(&kg * f.a.transpose()) + &a_b * f.a.transpose();
        g_uu += (&kinv * s * &kinv + &alpha * alpha.transpose() - &kinv) * 0.5;
        let tr = g_uu.trace();
        for i in 0..m {
            g_uu[(i, i)] += f.level * tr / m as f64;
        }
        if want_z {
            let mut dz2 = DMatrix::zeros(m, x.ncols());
            cov.backward(&g.z, x, &g_uf, &mut dtheta, Some(&mut dz), None);
            cov.backward(&g.z, &g.z, &g_uu, &mut dtheta, Some(&mut dz2), None);
            // K_uu is symmetric in its two arguments, so the second-slot
            // gradient equals the first-slot gradient of the transpose.
            cov.backward(&g.z, &g.z, &g_uu.transpose(), &mut vec![0.0; dtheta.len()], Some(&mut dz), None);
            dz += dz2;
        } else {
            cov.backward(&g.z, x, &g_uf, &mut dtheta, None, None);
            cov.backward(&g.z, &g.z, &g_uu, &mut dtheta, None, None);
        }
        cov.backward_diag(x, &b_vec, &mut dtheta);
    }
    GroupGrad { dm, dl, dz, dtheta, dw }
}

fn inv_softplus(d: f64) -> f64 {
    d + (-(-d).exp_m1()).ln()
}

fn softplus(r: f64) -> f64 {
    if r > 30.0 {
        r
    } else {
        r.exp().ln_1p()
    }
}

fn pack_group(g: &InducingGroup, cov: &dyn Covariance, mask: ParamMask, out: &mut Vec<f64>) {
    out.extend(g.mean.iter());
    let m = g.size();
    for j in 0..m {
        out.push(inv_softplus(g.chol[(j, j)]));
        for i in j + 1..m {
            out.push(g.chol[(i, j)]);
        }
    }
    if mask.inducing {
        out.extend(g.z.iter());
    }
    if mask.hyperparameters {
        out.extend(cov.params());
    }
}

fn unpack_group(g: &mut InducingGroup, cov: &mut dyn Covariance, mask: ParamMask, p: &[f64], off: &mut usize) {
    let m = g.size();
    g.mean.copy_from_slice(&p[*off..*off + m]);
    *off += m;
    for j in 0..m {
        g.chol[(j, j)] = softplus(p[*off]);
        *off += 1;
        for i in j + 1..m {
            g.chol[(i, j)] = p[*off];
            *off += 1;
        }
    }
    if mask.inducing {
        let n = g.z.len();
        g.z.as_mut_slice().copy_from_slice(&p[*off..*off + n]);
        *off += n;
    }
    if mask.hyperparameters {
        let n = cov.n_params();
        cov.set_params(&p[*off..*off + n]);
        *off += n;
    }
}

fn push_group_grad(g: &InducingGroup, gr: &GroupGrad, theta: Option<&[f64]>, mask: ParamMask, out: &mut Vec<f64>) {
    out.extend(gr.dm.iter());
    let m = g.size();
    for j in 0..m {
        let raw = inv_softplus(g.chol[(j, j)]);
        out.push(gr.dl[(j, j)] * sigmoid(raw));
        for i in j + 1..m {
            out.push(gr.dl[(i, j)]);
        }
    }
    if mask.inducing {
        out.extend(gr.dz.iter());
    }
    if mask.hyperparameters {
        out.extend(theta.unwrap_or(&gr.dtheta).iter());
    }
}

fn likelihood_grads(lik: &Likelihood, mu: &DVector<f64>, v: &DVector<f64>, batch: &Batch)
    -> Result<(f64, DVector<f64>, DVector<f64>, f64)> {
    check_moments(mu, v, &batch.y)?;
    Ok(match lik {
        Likelihood::Gaussian { noise } => gaussian_ell(mu, v, &batch.y, *noise, batch.scale),
        Likelihood::Bernoulli => {
            check_binary(&batch.y)?;
            let (val, gmu, gv) = bernoulli_ell(mu, v, &batch.y, batch.scale);
            (val, gmu, gv, 0.0)
        }
    })
}

/// A sparse variational model trainable by [`train`].
pub trait SparseModel: Clone {
    /// Number of standard-normal draws per ELBO evaluation.
    fn noise_dim(&self) -> usize;
    fn likelihood(&self) -> &Likelihood;
    fn set_noise(&mut self, noise: f64);
    fn pack(&self, mask: ParamMask) -> Vec<f64>;
    fn unpack(&mut self, p: &[f64], mask: ParamMask);
    /// ELBO breakdown and, if requested, the gradient laid out as [`pack`].
    ///
    /// [`pack`]: SparseModel::pack
    fn objective(&self, batch: &Batch, eps: &[f64], mask: ParamMask, want_grad: bool)
        -> Result<(ElboBreakdown, Option<Vec<f64>>)>;
    /// Refresh of non-gradient (closed-form) factors after a step.
    fn after_step(&mut self) {}
    fn input_dim(&self) -> usize;
}

impl SparseModel for MultiSvgp {
    fn noise_dim(&self) -> usize {
        match self.weights {
            Weights::Horseshoe(_) => self.pool.len(),
            Weights::Point(_) => 0,
        }
    }

    fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    fn set_noise(&mut self, noise: f64) {
        if let Likelihood::Gaussian { noise: n } = &mut self.likelihood {
            *n = noise;
        }
    }

    fn input_dim(&self) -> usize {
        MultiSvgp::input_dim(self)
    }

    fn pack(&self, mask: ParamMask) -> Vec<f64> {
        let mut p = Vec::new();
        for (g, k) in self.groups.iter().zip(&self.pool.members) {
            pack_group(g, k, mask, &mut p);
        }
        if mask.weights {
            match &self.weights {
                Weights::Horseshoe(s) => {
                    p.push(s.mu_tau);
                    p.push(s.sigma_tau.ln());
                    p.extend(&s.mu_lambda);
                    p.extend(s.sigma_lambda.iter().map(|v| v.ln()));
                }
                Weights::Point(w) => p.extend(w.iter().map(|v| v.ln())),
            }
        }
        if let (true, Likelihood::Gaussian { noise }) = (mask.noise, &self.likelihood) {
            p.push(noise.ln());
        }
        p
    }

    fn unpack(&mut self, p: &[f64], mask: ParamMask) {
        let mut off = 0;
        for (g, k) in self.groups.iter_mut().zip(self.pool.members.iter_mut()) {
            unpack_group(g, k, mask, p, &mut off);
        }
        let m = self.pool.len();
        if mask.weights {
            match &mut self.weights {
                Weights::Horseshoe(s) => {
                    s.mu_tau = p[off];
                    s.sigma_tau = p[off + 1].exp();
                    off += 2;
                    s.mu_lambda.copy_from_slice(&p[off..off + m]);
                    off += m;
                    for (sl, v) in s.sigma_lambda.iter_mut().zip(&p[off..off + m]) {
                        *sl = v.exp();
                    }
                    off += m;
                }
                Weights::Point(w) => {
                    for (wi, v) in w.iter_mut().zip(&p[off..off + m]) {
                        *wi = v.exp();
                    }
                    off += m;
                }
            }
        }
        if let (true, Likelihood::Gaussian { noise }) = (mask.noise, &mut self.likelihood) {
            *noise = p[off].exp();
        }
    }

    fn objective(&self, batch: &Batch, eps: &[f64], mask: ParamMask, want_grad: bool)
        -> Result<(ElboBreakdown, Option<Vec<f64>>)> {
        if batch.x.ncols() != self.input_dim() {
            return Err(Error::Dimension("batch input dimension".into()));
        }
        let (w, kl_w) = match &self.weights {
            Weights::Horseshoe(s) => (sample_weights(s, eps)?, kl_weights(s)?),
            Weights::Point(w) => (w.clone(), 0.0),
        };
        let n = batch.y.len();
        let mut fwd = Vec::with_capacity(self.groups.len());
        let mut mu = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        let mut kl_u = 0.0;
        for ((g, k), wi) in self.groups.iter().zip(&self.pool.members).zip(&w) {
            let f = group_forward(k, g, &batch.x)?;
            mu += &f.proj * *wi;
            v += &f.core * (wi * wi);
            kl_u += f.kl;
            fwd.push(f);
        }
        let (ell, gmu, gv, dnoise) = likelihood_grads(&self.likelihood, &mu, &v, batch)?;
        let br = ElboBreakdown::new(ell, kl_u, kl_w);
        if !want_grad {
            return Ok((br, None));
        }
        let mut grad = Vec::new();
        let mut dw = Vec::with_capacity(w.len());
        for (((g, k), f), wi) in self.groups.iter().zip(&self.pool.members).zip(&fwd).zip(&w) {
            let gr = group_backward(k, g, &batch.x, f, *wi, &gmu, &gv, mask.inducing, mask.hyperparameters);
            dw.push(gr.dw);
            push_group_grad(g, &gr, None, mask, &mut grad);
        }
        if mask.weights {
            match &self.weights {
                Weights::Horseshoe(s) => {
                    let m = w.len();
                    let mut d_mu_l = vec![0.0; m];
                    let mut d_sig_l = vec![0.0; m];
                    let (mut d_mu_t, mut d_sig_t) = (0.0, 0.0);
                    for i in 0..m {
                        let chain = dw[i] * w[i];
                        d_mu_t += chain;
                        d_sig_t += chain * eps[i];
                        let (gm, gs) = kl_block_grad(s.mu_lambda[i], s.sigma_lambda[i], s.s_lambda[i], s.r_lambda[i]);
                        d_mu_l[i] = chain - gm;
                        d_sig_l[i] = (chain * eps[i] - gs) * s.sigma_lambda[i];
                    }
                    let (gm, gs) = kl_block_grad(s.mu_tau, s.sigma_tau, s.s_tau, s.r_tau);
                    grad.push(d_mu_t - gm);
                    grad.push((d_sig_t - gs) * s.sigma_tau);
                    grad.extend(d_mu_l);
                    grad.extend(d_sig_l);
                }
                Weights::Point(_) => grad.extend(dw.iter().zip(&w).map(|(d, wi)| d * wi)),
            }
        }
        if let (true, Likelihood::Gaussian { .. }) = (mask.noise, &self.likelihood) {
            grad.push(dnoise);
        }
        Ok((br, Some(grad)))
    }

    fn after_step(&mut self) {
        if let Weights::Horseshoe(s) = &mut self.weights {
            *s = update_aux(s);
        }
    }
}

impl SvgpBaseline {
    /// Kernel parameter indices (into `WeightedSum::params`) that are trainable.
    fn kernel_param_selection(&self, mask: ParamMask) -> Vec<usize> {
        let m = self.kernel.terms.len();
        let total = self.kernel.n_params();
        (0..total).filter(|&i| if i < m { mask.weights } else { mask.hyperparameters }).collect()
    }
}

impl SparseModel for SvgpBaseline {
    fn noise_dim(&self) -> usize {
        0
    }

    fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    fn set_noise(&mut self, noise: f64) {
        if let Likelihood::Gaussian { noise: n } = &mut self.likelihood {
            *n = noise;
        }
    }

    fn input_dim(&self) -> usize {
        self.group.z.ncols()
    }

    fn pack(&self, mask: ParamMask) -> Vec<f64> {
        let mut p = Vec::new();
        let inner = ParamMask { hyperparameters: false, ..mask };
        pack_group(&self.group, &self.kernel, inner, &mut p);
        let kp = self.kernel.params();
        p.extend(self.kernel_param_selection(mask).into_iter().map(|i| kp[i]));
        if let (true, Likelihood::Gaussian { noise }) = (mask.noise, &self.likelihood) {
            p.push(noise.ln());
        }
        p
    }

    fn unpack(&mut self, p: &[f64], mask: ParamMask) {
        let mut off = 0;
        let inner = ParamMask { hyperparameters: false, ..mask };
        unpack_group(&mut self.group, &mut self.kernel, inner, p, &mut off);
        let mut kp = self.kernel.params();
        for i in self.kernel_param_selection(mask) {
            kp[i] = p[off];
            off += 1;
        }
        self.kernel.set_params(&kp);
        if let (true, Likelihood::Gaussian { noise }) = (mask.noise, &mut self.likelihood) {
            *noise = p[off].exp();
        }
    }

    fn objective(&self, batch: &Batch, _eps: &[f64], mask: ParamMask, want_grad: bool)
        -> Result<(ElboBreakdown, Option<Vec<f64>>)> {
        if batch.x.ncols() != self.input_dim() {
            return Err(Error::Dimension("batch input dimension".into()));
        }
        let f = group_forward(&self.kernel, &self.group, &batch.x)?;
        let (ell, gmu, gv, dnoise) = likelihood_grads(&self.likelihood, &f.proj, &f.core, batch)?;
        let br = ElboBreakdown::new(ell, f.kl, 0.0);
        if !want_grad {
            return Ok((br, None));
        }
        let sel = self.kernel_param_selection(mask);
        let gr = group_backward(&self.kernel, &self.group, &batch.x, &f, 1.0, &gmu, &gv, mask.inducing, !sel.is_empty());
        let mut grad = Vec::new();
        let inner = ParamMask { hyperparameters: false, ..mask };
        push_group_grad(&self.group, &gr, None, inner, &mut grad);
        grad.extend(sel.into_iter().map(|i| gr.dtheta[i]));
        if let (true, Likelihood::Gaussian { .. }) = (mask.noise, &self.likelihood) {
            grad.push(dnoise);
        }
        Ok((br, Some(grad)))
    }
}

fn check_likelihood(model: &impl SparseModel, config: &TrainingConfig) -> Result<()> {
    let ok = matches!(
        (model.likelihood(), config.likelihood),
        (Likelihood::Gaussian { .. }, LikelihoodKind::Gaussian) | (Likelihood::Bernoulli, LikelihoodKind::Bernoulli)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Config("model likelihood does not match the training configuration".into()))
    }
}

/// ELBO on `batch` with weight noise `eps`; deterministic in its inputs.
pub fn elbo_step<M: SparseModel>(model: &M, batch: &Batch, eps: &[f64], config: &TrainingConfig) -> Result<ElboBreakdown> {
    check_likelihood(model, config)?;
    check_eps(model, eps)?;
    Ok(model.objective(batch, eps, config.mask(), false)?.0)
}

fn check_eps(model: &impl SparseModel, eps: &[f64]) -> Result<()> {
    if eps.len() != model.noise_dim() {
        return Err(Error::Dimension(format!("{} noise draws, model needs {}", eps.len(), model.noise_dim())));
    }
    Ok(())
}

/// Gradient of the ELBO w.r.t. the trainable parameters enabled in `config`,
/// laid out as [`SparseModel::pack`].
pub fn gradient<M: SparseModel>(model: &M, batch: &Batch, eps: &[f64], config: &TrainingConfig) -> Result<Vec<f64>> {
    check_likelihood(model, config)?;
    check_eps(model, eps)?;
    let g = model.objective(batch, eps, config.mask(), true)?.1.expect("gradient requested");
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    Ok(g)
}

/// Adam ascent state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

fn draw_eps(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Stochastic variational training. Each epoch reshuffles the data with the
/// run seed and visits `⌊N/b⌋` disjoint minibatches; the trace records the
/// breakdown evaluated before each step.
pub fn train<M: SparseModel>(model: &M, x: &DMatrix<f64>, y: &DVector<f64>, config: &TrainingConfig)
    -> Result<(M, Vec<ElboBreakdown>)> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::Dimension(format!("{} inputs and {n} targets", x.nrows())));
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension("dataset and model input dimensions differ".into()));
    }
    config.validate(n)?;
    check_likelihood(model, config)?;
    let mut model = model.clone();
    if config.iterations == 0 {
        return Ok((model, Vec::new()));
    }
    let mask = config.mask();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.pack(mask);
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let per_epoch = n / config.batch_size;
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        if it % per_epoch == 0 {
            order.shuffle(&mut rng);
        }
        let start = (it % per_epoch) * config.batch_size;
        let batch = Batch::select(x, y, &order[start..start + config.batch_size]);
        let eps = draw_eps(&mut rng, model.noise_dim());
        let diverged = |reason: String| Error::Divergence { iteration: it, reason };
        let (br, grad) = model.objective(&batch, &eps, mask, true).map_err(|e| diverged(e.to_string()))?;
        let grad = grad.expect("gradient requested");
        if !br.elbo.is_finite() {
            return Err(diverged(format!("non-finite ELBO {}", br.elbo)));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        trace.push(br);
        adam.step(&mut params, &grad);
        model.unpack(&params, mask);
        model.after_step();
    }
    Ok((model, trace))
}

/// Full-data ELBO averaged over `samples` weight draws (exact for models
/// without weight noise).
pub fn evaluate_elbo<M: SparseModel>(model: &M, x: &DMatrix<f64>, y: &DVector<f64>, samples: usize, seed: u64) -> Result<ElboBreakdown> {
    let batch = Batch::full(x, y)?;
    let draws = if model.noise_dim() == 0 { 1 } else { samples.max(1) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = ElboBreakdown::new(0.0, 0.0, 0.0);
    for _ in 0..draws {
        let eps = draw_eps(&mut rng, model.noise_dim());
        let b = model.objective(&batch, &eps, ParamMask::ALL, false)?.0;
        acc.expected_loglik += b.expected_loglik / draws as f64;
        acc.kl_inducing = b.kl_inducing;
        acc.kl_weights = b.kl_weights;
    }
    Ok(ElboBreakdown::new(acc.expected_loglik, acc.kl_inducing, acc.kl_weights))
}

/// Latent predictive mean and variance. The mean uses the weight summary;
/// the variance averages `Σ_i w_i² (marginal variance)_i` over
/// `mc_samples` weight draws.
pub fn predict_latent(model: &MultiSvgp, xs: &DMatrix<f64>, mc_samples: usize, seed: u64) -> Result<(DVector<f64>, DVector<f64>)> {
    let summary = model.weights.summary();
    let n = xs.nrows();
    let m = model.pool.len();
    let mut mean = DVector::zeros(n);
    let mut groups = Vec::with_capacity(m);
    for ((g, k), wi) in model.groups.iter().zip(&model.pool.members).zip(&summary) {
        let c = crate::multisvgp::group_conditional_with(k, g, xs, false)?;
        mean += &c.mean * *wi;
        groups.push(c.marg_var);
    }
    let mut var = DVector::zeros(n);
    match &model.weights {
        Weights::Point(w) => {
            for (gv, wi) in groups.iter().zip(w) {
                var += gv * (wi * wi);
            }
        }
        Weights::Horseshoe(s) => {
            let draws = mc_samples.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..draws {
                let w = sample_weights(s, &draw_eps(&mut rng, m))?;
                for (gv, wi) in groups.iter().zip(&w) {
                    var += gv * (wi * wi / draws as f64);
                }
            }
        }
    }
    Ok((mean, var))
}

/// Latent predictive mean and variance of the summed-kernel baseline.
pub fn predict_latent_baseline(model: &SvgpBaseline, xs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let c = crate::multisvgp::group_conditional_with(&model.kernel, &model.group, xs, false)?;
    Ok((c.mean, c.marg_var))
}
