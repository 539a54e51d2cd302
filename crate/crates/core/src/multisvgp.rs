//! Sparse variational models over a kernel pool.
//!
//! [`MultiSvgp`] attaches an independent inducing group `(Z_i, m_i, S_i)` to
//! every pool kernel `k_i`; given weights `w`,
//!
//! ```text
//! f | U, w ~ GP( Σ_i w_i μ_i(·; u_i),  Σ_i w_i² Σ_i(·, ·; u_i) )
//! μ_i(·)    = k_ui(·)ᵀ K_uiui⁻¹ u_i
//! Σ_i(·, ·) = k_i(·, ·) − k_ui(·)ᵀ K_uiui⁻¹ k_ui(·)
//! ```
//!
//! and `q(U) = Π_i N(m_i, S_i)`. [`SvgpBaseline`] instead uses one group
//! under the summed kernel `k̃ = Σ w_i² k_i`.
//!
//! All covariances of inducing variables are factorized with a relative
//! jitter of [`crate::linalg::BASE_JITTER`] (escalated on failure).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_exact::GaussianPosterior;
use crate::horseshoe::{weight_summary, HorseshoeState};
use crate::kernel::{Covariance, KernelExpr, KernelPool, WeightedSum};
use crate::linalg::{self, cholesky_jittered};

/// Inducing locations and the variational Gaussian `q(u_i) = N(m_i, L_i L_iᵀ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingGroup {
    /// `M_i × D` locations.
    pub z: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Lower-triangular factor of `S_i` with positive diagonal.
    pub chol: DMatrix<f64>,
}

impl InducingGroup {
    pub fn size(&self) -> usize {
        self.z.nrows()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let m = self.size();
        if m == 0 {
            return Err(Error::InvalidArgument("inducing group without points".into()));
        }
        if self.z.ncols() != input_dim {
            return Err(Error::Dimension(format!(
                "inducing locations with {} columns for {input_dim}-dimensional inputs",
                self.z.ncols()
            )));
        }
        if self.mean.len() != m || self.chol.shape() != (m, m) {
            return Err(Error::Dimension("inducing mean/factor shape does not match locations".into()));
        }
        for i in 0..m {
            if !(self.chol[(i, i)] > 0.0) {
                return Err(Error::InvalidArgument("inducing factor has nonpositive diagonal".into()));
            }
            for j in i + 1..m {
                if self.chol[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument("inducing factor is not lower triangular".into()));
                }
            }
        }
        if self.z.iter().chain(self.mean.iter()).chain(self.chol.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inducing group".into()));
        }
        Ok(())
    }
}

/// Kernel weights: a Horseshoe posterior or plain point values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Weights {
    Horseshoe(HorseshoeState),
    Point(Vec<f64>),
}

impl Weights {
    pub fn len(&self) -> usize {
        match self {
            Weights::Horseshoe(s) => s.len(),
            Weights::Point(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point summary used for prediction and reporting.
    pub fn summary(&self) -> Vec<f64> {
        match self {
            Weights::Horseshoe(s) => weight_summary(s),
            Weights::Point(w) => w.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    Gaussian { noise: f64 },
    Bernoulli,
}

/// One inducing group per pool kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSvgp {
    pub pool: KernelPool,
    pub groups: Vec<InducingGroup>,
    pub weights: Weights,
    pub likelihood: Likelihood,
}

impl MultiSvgp {
    pub fn new(pool: KernelPool, groups: Vec<InducingGroup>, weights: Weights, likelihood: Likelihood) -> Result<Self> {
        let model = MultiSvgp { pool, groups, weights, likelihood };
        model.validate()?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.groups.first().map_or(0, |g| g.z.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.pool.len();
        if self.groups.len() != m || self.weights.len() != m {
            return Err(Error::Dimension(format!(
                "pool of {m} kernels with {} groups and {} weights",
                self.groups.len(),
                self.weights.len()
            )));
        }
        let d = self.input_dim();
        self.pool.validate(Some(d))?;
        self.groups.iter().try_for_each(|g| g.validate(d))?;
        match &self.weights {
            Weights::Horseshoe(s) => s.validate()?,
            Weights::Point(w) => {
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidArgument("point weights must be finite and nonnegative".into()));
                }
            }
        }
        if let Likelihood::Gaussian { noise } = self.likelihood {
            if !(noise.is_finite() && noise > 0.0) {
                return Err(Error::InvalidArgument(format!("noise variance {noise}")));
            }
        }
        Ok(())
    }
}

/// A single inducing group under the summed kernel `k̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvgpBaseline {
    pub kernel: WeightedSum,
    pub group: InducingGroup,
    pub likelihood: Likelihood,
}

impl SvgpBaseline {
    pub fn new(pool: KernelPool, weights: &[f64], group: InducingGroup, likelihood: Likelihood) -> Result<Self> {
        if weights.len() != pool.len() {
            return Err(Error::Dimension(format!("{} weights for a pool of {}", weights.len(), pool.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("baseline weights must be positive".into()));
        }
        pool.validate(Some(group.z.ncols()))?;
        group.validate(group.z.ncols())?;
        Ok(SvgpBaseline { kernel: WeightedSum::new(pool.members, weights), group, likelihood })
    }
}

/// Prior-conditional and variational-marginal moments of one group.
#[derive(Clone, Debug)]
pub struct GroupConditional {
    /// `k_uᵀ K_uu⁻¹ m` (unweighted).
    pub mean: DVector<f64>,
    /// Diagonal of `k − k_uᵀ K_uu⁻¹ k_u`.
    pub cond_var: DVector<f64>,
    pub cond_cov: Option<DMatrix<f64>>,
    /// Diagonal of `k − k_uᵀ K_uu⁻¹ (K_uu − S) K_uu⁻¹ k_u`.
    pub marg_var: DVector<f64>,
    pub marg_cov: Option<DMatrix<f64>>,
}

fn check_inputs(xs: &DMatrix<f64>, d: usize) -> Result<()> {
    if xs.ncols() != d {
        return Err(Error::Dimension(format!("inputs with {} columns, model expects {d}", xs.ncols())));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inputs".into()));
    }
    Ok(())
}

/// Conditional moments of a group at `xs`; full matrices only when `full`.
pub fn group_conditional_with(
    cov: &dyn Covariance,
    g: &InducingGroup,
    xs: &DMatrix<f64>,
    full: bool,
) -> Result<GroupConditional> {
    check_inputs(xs, g.z.ncols())?;
    let chol = cholesky_jittered(&cov.gram(&g.z, &g.z))?.chol;
    let kux = cov.gram(&g.z, xs);
    let a = chol.solve(&kux);
    let mean = a.transpose() * &g.mean;
    let b = g.chol.transpose() * &a;
    let n = xs.nrows();
    let kdiag = cov.diag(xs);
    let q = DVector::from_fn(n, |j, _| kux.column(j).dot(&a.column(j)));
    let p = DVector::from_fn(n, |j, _| b.column(j).norm_squared());
    let cond_var = &kdiag - &q;
    let marg_var = &cond_var + &p;
    let (cond_cov, marg_cov) = if full {
        let kxx = cov.gram(xs, xs);
        let cond = kxx - kux.transpose() * &a;
        let marg = &cond + b.transpose() * &b;
        (Some(cond), Some(marg))
    } else {
        (None, None)
    };
    Ok(GroupConditional { mean, cond_var, cond_cov, marg_var, marg_cov })
}

/// Conditional moments of inducing group `g` under pool kernel `k`.
pub fn group_conditional(g: &InducingGroup, k: &KernelExpr, xs: &DMatrix<f64>, full: bool) -> Result<GroupConditional> {
    k.validate(Some(g.z.ncols()))?;
    group_conditional_with(k, g, xs, full)
}

fn check_weights(w: &[f64], m: usize) -> Result<()> {
    if w.len() != m {
        return Err(Error::Dimension(format!("{} weights for {m} groups", w.len())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Predictive `q(f(xs))` of a MultiSVGP for fixed weights, with full
/// covariance: `mean = Σ w_i μ_i`, `cov = Σ w_i² (marginal cov)_i`.
pub fn marginal_predictive(model: &MultiSvgp, w: &[f64], xs: &DMatrix<f64>) -> Result<GaussianPosterior> {
    check_weights(w, model.groups.len())?;
    check_inputs(xs, model.input_dim())?;
    let n = xs.nrows();
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for ((g, k), wi) in model.groups.iter().zip(&model.pool.members).zip(w) {
        if *wi == 0.0 {
            continue;
        }
        let c = group_conditional_with(k, g, xs, true)?;
        mean += c.mean * *wi;
        cov += c.marg_cov.expect("full covariance requested") * (wi * wi);
    }
    GaussianPosterior::new(mean, cov)
}

/// Predictive mean and marginal variances only.
pub fn marginal_predictive_diag(model: &MultiSvgp, w: &[f64], xs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    check_weights(w, model.groups.len())?;
    check_inputs(xs, model.input_dim())?;
    let n = xs.nrows();
    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for ((g, k), wi) in model.groups.iter().zip(&model.pool.members).zip(w) {
        if *wi == 0.0 {
            continue;
        }
        let c = group_conditional_with(k, g, xs, false)?;
        mean += c.mean * *wi;
        var += c.marg_var * (wi * wi);
    }
    Ok((mean, var))
}

/// Predictive `q(f(xs))` of the summed-kernel SVGP for weights `w`.
pub fn svgp_predictive(base: &SvgpBaseline, w: &[f64], xs: &DMatrix<f64>) -> Result<GaussianPosterior> {
    check_weights(w, base.kernel.terms.len())?;
    if w.iter().any(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("summed-kernel weights must be positive".into()));
    }
    let kernel = WeightedSum::new(base.kernel.terms.clone(), w);
    let c = group_conditional_with(&kernel, &base.group, xs, true)?;
    GaussianPosterior::new(c.mean, c.marg_cov.expect("full covariance requested"))
}

/// `KL(N(m, S) ‖ N(0, K))` from a factor of `K`.
pub(crate) fn gaussian_kl_to_prior(kchol: &Cholesky<f64, Dyn>, g: &InducingGroup) -> f64 {
    let lk = kchol.l();
    let a = lk.solve_lower_triangular(&g.chol).expect("triangular factor");
    let b = lk.solve_lower_triangular(&g.mean).expect("triangular factor");
    let logdet_s = 2.0 * g.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * (a.norm_squared() + b.norm_squared() - g.size() as f64 + linalg::logdet(kchol) - logdet_s)
}

/// `Σ_i KL(q(u_i) ‖ p(u_i))`.
pub fn kl_inducing(model: &MultiSvgp) -> Result<f64> {
    let mut kl = 0.0;
    for (g, k) in model.groups.iter().zip(&model.pool.members) {
        let chol = cholesky_jittered(&k.gram(&g.z, &g.z))?.chol;
        kl += gaussian_kl_to_prior(&chol, g);
    }
    Ok(kl)
}

/// An inducing location with its group membership.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedLocation {
    pub group: Option<usize>,
    pub location: Vec<f64>,
}

fn check_tags(model: &MultiSvgp, z: &[TaggedLocation], d: usize) -> Result<()> {
    for t in z {
        match t.group {
            None => return Err(Error::InvalidArgument("untagged inducing location".into())),
            Some(g) if g >= model.groups.len() => {
                return Err(Error::InvalidArgument(format!("inducing location tagged with unknown group {g}")))
            }
            _ => {}
        }
        if t.location.len() != d {
            return Err(Error::Dimension("inducing location dimension".into()));
        }
    }
    Ok(())
}

/// `k_uf(z, x) = Σ_i w_i 1{z ∈ Z_i} k_i(z, x)` for tagged locations.
pub fn cross_covariance(model: &MultiSvgp, w: &[f64], z: &[TaggedLocation], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_weights(w, model.groups.len())?;
    check_inputs(x, model.input_dim())?;
    check_tags(model, z, x.ncols())?;
    let xr = crate::kernel::rows(x);
    let d = x.ncols();
    Ok(DMatrix::from_fn(z.len(), x.nrows(), |a, j| {
        let g = z[a].group.expect("checked");
        w[g] * model.pool.members[g].value(&z[a].location, &xr[j * d..(j + 1) * d])
    }))
}

/// `k_uu(z, z') = Σ_i 1{z ∈ Z_i} 1{z' ∈ Z_i} k_i(z, z')`; block diagonal.
pub fn inducing_covariance(model: &MultiSvgp, z: &[TaggedLocation]) -> Result<DMatrix<f64>> {
    check_tags(model, z, model.input_dim())?;
    Ok(DMatrix::from_fn(z.len(), z.len(), |a, b| {
        let (ga, gb) = (z[a].group.expect("checked"), z[b].group.expect("checked"));
        if ga == gb {
            model.pool.members[ga].value(&z[a].location, &z[b].location)
        } else {
            0.0
        }
    }))
}

/// All inducing locations of the model, tagged with their group.
pub fn tagged_locations(model: &MultiSvgp) -> Vec<TaggedLocation> {
    model
        .groups
        .iter()
        .enumerate()
        .flat_map(|(i, g)| {
            (0..g.size()).map(move |r| TaggedLocation {
                group: Some(i),
                location: g.z.row(r).iter().copied().collect(),
            })
        })
        .collect()
}

/// Seeded inducing groups started at the prior: `Z_i` is an independent
/// random subset of `x`, `m_i = 0` and `S_i = K_uiui` (plus jitter).
pub fn init_groups(pool: &KernelPool, x: &DMatrix<f64>, per_group: usize, seed: u64) -> Result<Vec<InducingGroup>> {
    let n = x.nrows();
    if per_group == 0 || per_group > n {
        return Err(Error::InvalidArgument(format!("{per_group} inducing points per group for {n} inputs")));
    }
    check_inputs(x, x.ncols())?;
    pool.validate(Some(x.ncols()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.members
        .iter()
        .map(|k| {
            let idx = rand::seq::index::sample(&mut rng, n, per_group);
            let z = DMatrix::from_fn(per_group, x.ncols(), |r, c| x[(idx.index(r), c)]);
            prior_group(k, z)
        })
        .collect()
}

/// A group at the given locations whose `q(u)` equals the prior.
pub fn prior_group(cov: &dyn Covariance, z: DMatrix<f64>) -> Result<InducingGroup> {
    let f = cholesky_jittered(&cov.gram(&z, &z))?;
    let m = z.nrows();
    Ok(InducingGroup { z, mean: DVector::zeros(m), chol: f.chol.l() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::BaseKernel;

    fn line(n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64)
    }

    fn two_kernel_model() -> MultiSvgp {
        let pool = KernelPool::new(vec![
            KernelExpr::single(BaseKernel::se(0.8)),
            KernelExpr::single(BaseKernel::per(1.0, 1.5)),
        ]);
        let x = line(12, -2.0, 2.0);
        let groups = init_groups(&pool, &x, 4, 7).unwrap();
        MultiSvgp::new(pool, groups, Weights::Point(vec![0.9, 0.6]), Likelihood::Gaussian { noise: 0.1 }).unwrap()
    }

    #[test]
    fn conditional_interpolates_inducing_values() {
        let k = KernelExpr::single(BaseKernel::se(1.0));
        let z = line(3, -1.0, 1.0);
        let mut g = prior_group(&k, z.clone()).unwrap();
        g.mean = DVector::from_vec(vec![0.4, -1.1, 2.0]);
        g.chol = DMatrix::identity(3, 3) * 1e-12;
        let c = group_conditional(&g, &k, &z, false).unwrap();
        assert!((&c.mean - &g.mean).amax() < 1e-5);
        assert!(c.cond_var.amax() < 1e-5);
    }

    #[test]
    fn zero_mean_gives_zero_conditional_mean() {
        let k = KernelExpr::single(BaseKernel::per(0.7, 2.0));
        let g = prior_group(&k, line(4, 0.0, 3.0)).unwrap();
        let c = group_conditional(&g, &k, &line(7, -1.0, 5.0), false).unwrap();
        assert_eq!(c.mean.amax(), 0.0);
    }

    #[test]
    fn zero_weights_give_zero_predictive() {
        let model = two_kernel_model();
        let p = marginal_predictive(&model, &[0.0, 0.0], &line(5, -1.0, 1.0)).unwrap();
        assert_eq!(p.mean.amax(), 0.0);
        assert_eq!(p.cov.amax(), 0.0);
    }

    #[test]
    fn prior_groups_recover_prior_covariance() {
        let model = two_kernel_model();
        let xs = line(9, -3.0, 3.0);
        let w = [0.9, 0.6];
        let p = marginal_predictive(&model, &w, &xs).unwrap();
        let prior = model.pool.members[0].gram(&xs, &xs) * 0.81 + model.pool.members[1].gram(&xs, &xs) * 0.36;
        assert!((p.cov - prior).amax() < 1e-8);
        assert_eq!(p.mean.amax(), 0.0);
    }

    #[test]
    fn single_group_matches_baseline() {
        let k = KernelExpr::single(BaseKernel::se(0.6));
        let pool = KernelPool::new(vec![k.clone()]);
        let mut g = prior_group(&k, line(4, -1.0, 1.0)).unwrap();
        g.mean = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        g.chol *= 0.5;
        let multi = MultiSvgp::new(pool.clone(), vec![g.clone()], Weights::Point(vec![1.0]), Likelihood::Bernoulli).unwrap();
        let base = SvgpBaseline::new(pool, &[1.0], g, Likelihood::Bernoulli).unwrap();
        let xs = line(6, -2.0, 2.0);
        let a = marginal_predictive(&multi, &[1.0], &xs).unwrap();
        let b = svgp_predictive(&base, &[1.0], &xs).unwrap();
        assert!((a.mean - b.mean).amax() < 1e-14);
        assert!((a.cov - b.cov).amax() < 1e-14);
    }

    #[test]
    fn kl_zero_at_init_and_grows_with_mean() {
        let mut model = two_kernel_model();
        assert!(kl_inducing(&model).unwrap().abs() < 1e-9);
        model.groups[0].mean = DVector::from_element(4, 0.5);
        let k1 = kl_inducing(&model).unwrap();
        model.groups[0].mean *= 2.0;
        let k2 = kl_inducing(&model).unwrap();
        assert!(k2 > k1 && k1 > 0.0);
    }

    #[test]
    fn cross_covariance_blocks() {
        let model = two_kernel_model();
        let tags = tagged_locations(&model);
        let kuu = inducing_covariance(&model, &tags).unwrap();
        for a in 0..4 {
            for b in 4..8 {
                assert_eq!(kuu[(a, b)], 0.0);
            }
        }
        let mut bad = tags.clone();
        bad[0].group = None;
        assert!(cross_covariance(&model, &[1.0, 1.0], &bad, &line(2, 0.0, 1.0)).is_err());
    }

    #[test]
    fn init_groups_contract() {
        let pool = KernelPool::new(vec![KernelExpr::single(BaseKernel::se(1.0)); 2]);
        let x = line(10, 0.0, 1.0);
        let a = init_groups(&pool, &x, 3, 11).unwrap();
        let b = init_groups(&pool, &x, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(init_groups(&pool, &x, 11, 1).is_err());
        let full = init_groups(&pool, &x, 10, 2).unwrap();
        let mut zs: Vec<f64> = full[0].z.iter().copied().collect();
        zs.sort_by(f64::total_cmp);
        assert_eq!(zs, x.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn invalid_models_rejected() {
        let mut model = two_kernel_model();
        model.groups[1].chol[(0, 0)] = -1.0;
        assert!(model.validate().is_err());
        let mut model = two_kernel_model();
        model.weights = Weights::Point(vec![1.0]);
        assert!(model.validate().is_err());
    }
}
