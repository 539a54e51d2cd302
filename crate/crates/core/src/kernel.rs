//! Base kernels, multiplicative compositions, the kernel pool and additive
//! kernels over dimension subsets.
//!
//! Base kernels carry no variance hyperparameter; amplitude enters only
//! through the weights `w_i` of the weighted sum `Σ w_i² k_i`.
//!
//! Hyperparameters are exposed to optimizers in unconstrained form:
//! `ln ℓ` and `ln p` for SE/PER, the raw offset for LIN.

use std::f64::consts::PI;
use std::fmt;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum multiplicative order of a pool member.
pub const MAX_POOL_ORDER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseKind {
    SE,
    LIN,
    PER,
}

impl fmt::Display for BaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BaseKind::SE => "SE",
            BaseKind::LIN => "LIN",
            BaseKind::PER => "PER",
        };
        f.write_str(s)
    }
}

/// A base kernel with its hyperparameters.
///
/// `dims` restricts the kernel to a subset of input columns (0-based);
/// `None` means all columns.
///
/// PER is `exp(−2 Σ_d sin²(π(x_d − x'_d)/p)/ℓ²)`: the 1-D periodic kernel,
/// and a product of 1-D periodic kernels over several columns. (The
/// Euclidean-distance form `sin²(π‖x − x'‖/p)` is not positive definite in
/// more than one dimension.)
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BaseKernel {
    SE {
        lengthscale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
    LIN {
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
    PER {
        lengthscale: f64,
        period: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
}

impl BaseKernel {
    pub fn se(lengthscale: f64) -> Self {
        BaseKernel::SE { lengthscale, dims: None }
    }

    pub fn lin(offset: f64) -> Self {
        BaseKernel::LIN { offset, dims: None }
    }

    pub fn per(lengthscale: f64, period: f64) -> Self {
        BaseKernel::PER { lengthscale, period, dims: None }
    }

    /// Default hyperparameters for a kind: `ℓ = 1`, `p = 1`, offset 0.
    pub fn default_of(kind: BaseKind) -> Self {
        match kind {
            BaseKind::SE => Self::se(1.0),
            BaseKind::LIN => Self::lin(0.0),
            BaseKind::PER => Self::per(1.0, 1.0),
        }
    }

    pub fn with_dims(mut self, active: Vec<usize>) -> Self {
        match &mut self {
            BaseKernel::SE { dims, .. } | BaseKernel::LIN { dims, .. } | BaseKernel::PER { dims, .. } => {
                *dims = Some(active)
            }
        }
        self
    }

    pub fn kind(&self) -> BaseKind {
        match self {
            BaseKernel::SE { .. } => BaseKind::SE,
            BaseKernel::LIN { .. } => BaseKind::LIN,
            BaseKernel::PER { .. } => BaseKind::PER,
        }
    }

    pub fn dims(&self) -> Option<&[usize]> {
        match self {
            BaseKernel::SE { dims, .. } | BaseKernel::LIN { dims, .. } | BaseKernel::PER { dims, .. } => {
                dims.as_deref()
            }
        }
    }

    /// Checks hyperparameter invariants and, when `input_dim` is given,
    /// that the active dimensions exist.
    pub fn validate(&self, input_dim: Option<usize>) -> Result<()> {
        match *self {
            BaseKernel::SE { lengthscale, .. } => positive("SE lengthscale", lengthscale)?,
            BaseKernel::LIN { offset, .. } => {
                if !offset.is_finite() {
                    return Err(Error::InvalidHyperparameter(format!("LIN offset {offset}")));
                }
            }
            BaseKernel::PER { lengthscale, period, .. } => {
                positive("PER lengthscale", lengthscale)?;
                positive("PER period", period)?;
            }
        }
        if let Some(dims) = self.dims() {
            if dims.is_empty() {
                return Err(Error::InvalidHyperparameter("empty active dimension list".into()));
            }
            if dims.iter().duplicates().next().is_some() {
                return Err(Error::InvalidHyperparameter("duplicate active dimension".into()));
            }
            if let Some(d) = input_dim {
                if let Some(bad) = dims.iter().find(|&&i| i >= d) {
                    return Err(Error::Dimension(format!("active dimension {bad} >= input dimension {d}")));
                }
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        match self {
            BaseKernel::PER { .. } => 2,
            _ => 1,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            BaseKernel::SE { lengthscale, .. } => vec![lengthscale.ln()],
            BaseKernel::LIN { offset, .. } => vec![offset],
            BaseKernel::PER { lengthscale, period, .. } => vec![lengthscale.ln(), period.ln()],
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            BaseKernel::SE { lengthscale, .. } => *lengthscale = p[0].exp(),
            BaseKernel::LIN { offset, .. } => *offset = p[0],
            BaseKernel::PER { lengthscale, period, .. } => {
                *lengthscale = p[0].exp();
                *period = p[1].exp();
            }
        }
    }

    /// Kernel value; `x1` and `x2` are full input rows.
    pub fn value(&self, x1: &[f64], x2: &[f64]) -> f64 {
        match *self {
            BaseKernel::SE { lengthscale, ref dims } => {
                let r2 = sq_dist(x1, x2, dims.as_deref());
                (-r2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            BaseKernel::LIN { offset, ref dims } => {
                for_dims(x1.len(), dims.as_deref()).map(|d| (x1[d] - offset) * (x2[d] - offset)).sum()
            }
            BaseKernel::PER { lengthscale, period, ref dims } => {
                let s2: f64 = for_dims(x1.len(), dims.as_deref()).map(|d| (PI * (x1[d] - x2[d]) / period).sin().powi(2)).sum();
                (-2.0 * s2 / (lengthscale * lengthscale)).exp()
            }
        }
    }

    /// Value plus derivatives w.r.t. the unconstrained hyperparameters
    /// (`dtheta[..n_params]`) and both inputs (`dx1`, `dx2`, full length,
    /// overwritten).
    fn value_grad(&self, x1: &[f64], x2: &[f64], dtheta: &mut [f64], dx1: &mut [f64], dx2: &mut [f64]) -> f64 {
        dx1.iter_mut().for_each(|v| *v = 0.0);
        dx2.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            BaseKernel::SE { lengthscale, ref dims } => {
                let l2 = lengthscale * lengthscale;
                let r2 = sq_dist(x1, x2, dims.as_deref());
                let k = (-r2 / (2.0 * l2)).exp();
                dtheta[0] = k * r2 / l2;
                for d in for_dims(x1.len(), dims.as_deref()) {
                    let g = -k * (x1[d] - x2[d]) / l2;
                    dx1[d] = g;
                    dx2[d] = -g;
                }
                k
            }
            BaseKernel::LIN { offset, ref dims } => {
                let mut k = 0.0;
                let mut dc = 0.0;
                for d in for_dims(x1.len(), dims.as_deref()) {
                    let a = x1[d] - offset;
                    let b = x2[d] - offset;
                    k += a * b;
                    dc -= a + b;
                    dx1[d] = b;
                    dx2[d] = a;
                }
                dtheta[0] = dc;
                k
            }
            BaseKernel::PER { lengthscale, period, ref dims } => {
                let l2 = lengthscale * lengthscale;
                let mut s2 = 0.0;
                let mut dp = 0.0;
                for d in for_dims(x1.len(), dims.as_deref()) {
                    let delta = x1[d] - x2[d];
                    s2 += (PI * delta / period).sin().powi(2);
                    let sin2 = (2.0 * PI * delta / period).sin();
                    dp += delta * sin2;
                    // ∂k/∂x1_d, scaled by k below.
                    dx1[d] = -2.0 * PI * sin2 / (period * l2);
                }
                let k = (-2.0 * s2 / l2).exp();
                dtheta[0] = k * 4.0 * s2 / l2;
                dtheta[1] = k * 2.0 * PI * dp / (period * l2);
                for d in for_dims(x1.len(), dims.as_deref()) {
                    dx1[d] *= k;
                    dx2[d] = -dx1[d];
                }
                k
            }
        }
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!("{what} must be positive and finite, got {v}")))
    }
}

fn for_dims(n: usize, dims: Option<&[usize]>) -> Box<dyn Iterator<Item = usize> + '_> {
    match dims {
        Some(d) => Box::new(d.iter().copied()),
        None => Box::new(0..n),
    }
}

fn sq_dist(x1: &[f64], x2: &[f64], dims: Option<&[usize]>) -> f64 {
    match dims {
        Some(d) => d.iter().map(|&i| (x1[i] - x2[i]).powi(2)).sum(),
        None => x1.iter().zip(x2).map(|(a, b)| (a - b).powi(2)).sum(),
    }
}

/// Evaluates a base kernel with input validation.
pub fn eval_base(b: &BaseKernel, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::Dimension(format!("inputs of length {} and {}", x1.len(), x2.len())));
    }
    b.validate(Some(x1.len()))?;
    Ok(b.value(x1, x2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitScheme {
    /// Broad random hyperparameters.
    Weak,
    /// Data-driven hyperparameters.
    Strong,
}

/// Product of base kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelExpr {
    pub factors: Vec<BaseKernel>,
    pub init_scheme: InitScheme,
}

impl KernelExpr {
    pub fn new(factors: Vec<BaseKernel>, init_scheme: InitScheme) -> Self {
        KernelExpr { factors, init_scheme }
    }

    pub fn single(b: BaseKernel) -> Self {
        KernelExpr::new(vec![b], InitScheme::Weak)
    }

    pub fn product(a: BaseKernel, b: BaseKernel) -> Self {
        KernelExpr::new(vec![a, b], InitScheme::Weak)
    }

    pub fn kinds(&self) -> Vec<BaseKind> {
        self.factors.iter().map(BaseKernel::kind).collect()
    }

    /// `true` when the factors are exactly `{a, b}` in either order.
    pub fn is_structure(&self, a: BaseKind, b: BaseKind) -> bool {
        let k = self.kinds();
        k.len() == 2 && ((k[0] == a && k[1] == b) || (k[0] == b && k[1] == a))
    }

    pub fn validate(&self, input_dim: Option<usize>) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::InvalidHyperparameter("kernel expression without factors".into()));
        }
        self.factors.iter().try_for_each(|f| f.validate(input_dim))
    }

    pub fn value(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.factors.iter().map(|f| f.value(x1, x2)).product()
    }

    /// Short structural name such as `SE×PER`.
    pub fn name(&self) -> String {
        self.factors.iter().map(|f| f.kind().to_string()).join("×")
    }
}

/// Evaluates a product kernel with input validation.
pub fn eval_expr(e: &KernelExpr, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::Dimension(format!("inputs of length {} and {}", x1.len(), x2.len())));
    }
    e.validate(Some(x1.len()))?;
    Ok(e.value(x1, x2))
}

/// Row-major copy of a matrix, so that row `i` is `&buf[i*d..(i+1)*d]`.
pub(crate) fn rows(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().as_slice().to_vec()
}

/// A covariance function with differentiable unconstrained parameters.
///
/// Shape preconditions (equal column counts) are the caller's
/// responsibility; use [`gram`] for a checked entry point.
pub trait Covariance {
    fn n_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);

    fn eval(&self, x1: &[f64], x2: &[f64]) -> f64;

    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let d = a.ncols();
        let (ra, rb) = (rows(a), rows(b));
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            self.eval(&ra[i * d..(i + 1) * d], &rb[j * d..(j + 1) * d])
        })
    }

    fn diag(&self, a: &DMatrix<f64>) -> DVector<f64> {
        let d = a.ncols();
        let ra = rows(a);
        DVector::from_fn(a.nrows(), |i, _| {
            let x = &ra[i * d..(i + 1) * d];
            self.eval(x, x)
        })
    }

    /// Accumulates `Σ_ij G_ij ∂K_ij/∂θ` into `dparams`, and the gradients
    /// w.r.t. the rows of `a` and `b` into `da` / `db` when requested.
    fn backward(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        g: &DMatrix<f64>,
        dparams: &mut [f64],
        da: Option<&mut DMatrix<f64>>,
        db: Option<&mut DMatrix<f64>>,
    );

    /// Accumulates `Σ_i g_i ∂k(x_i, x_i)/∂θ` into `dparams`.
    fn backward_diag(&self, a: &DMatrix<f64>, g: &DVector<f64>, dparams: &mut [f64]);
}

/// Scratch space for product-rule gradients of a [`KernelExpr`].
struct ProductScratch {
    vals: Vec<f64>,
    dtheta: Vec<[f64; 2]>,
    dx1: Vec<Vec<f64>>,
    dx2: Vec<Vec<f64>>,
    others: Vec<f64>,
}

impl ProductScratch {
    fn new(nf: usize, d: usize) -> Self {
        ProductScratch {
            vals: vec![0.0; nf],
            dtheta: vec![[0.0; 2]; nf],
            dx1: vec![vec![0.0; d]; nf],
            dx2: vec![vec![0.0; d]; nf],
            others: vec![0.0; nf],
        }
    }
}

impl KernelExpr {
    fn param_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.factors.len());
        let mut acc = 0;
        for f in &self.factors {
            off.push(acc);
            acc += f.n_params();
        }
        off
    }

    /// Evaluates all factors with gradients and fills `s.others` with the
    /// product of the remaining factors.
    fn entry_grad(&self, x1: &[f64], x2: &[f64], s: &mut ProductScratch) {
        let nf = self.factors.len();
        for (f, fac) in self.factors.iter().enumerate() {
            s.vals[f] = fac.value_grad(x1, x2, &mut s.dtheta[f], &mut s.dx1[f], &mut s.dx2[f]);
        }
        let mut prefix = 1.0;
        for f in 0..nf {
            s.others[f] = prefix;
            prefix *= s.vals[f];
        }
        let mut suffix = 1.0;
        for f in (0..nf).rev() {
            s.others[f] *= suffix;
            suffix *= s.vals[f];
        }
    }
}

impl Covariance for KernelExpr {
    fn n_params(&self) -> usize {
        self.factors.iter().map(BaseKernel::n_params).sum()
    }

    fn params(&self) -> Vec<f64> {
        self.factors.iter().flat_map(BaseKernel::params).collect()
    }

    fn set_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for f in &mut self.factors {
            let n = f.n_params();
            f.set_params(&p[off..off + n]);
            off += n;
        }
    }

    fn eval(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.value(x1, x2)
    }

    fn backward(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        g: &DMatrix<f64>,
        dparams: &mut [f64],
        mut da: Option<&mut DMatrix<f64>>,
        mut db: Option<&mut DMatrix<f64>>,
    ) {
        let d = a.ncols();
        let (ra, rb) = (rows(a), rows(b));
        let offsets = self.param_offsets();
        let mut s = ProductScratch::new(self.factors.len(), d);
        for j in 0..b.nrows() {
            let x2 = &rb[j * d..(j + 1) * d];
            for i in 0..a.nrows() {
                let gij = g[(i, j)];
                if gij == 0.0 {
                    continue;
                }
                let x1 = &ra[i * d..(i + 1) * d];
                self.entry_grad(x1, x2, &mut s);
                for (f, fac) in self.factors.iter().enumerate() {
                    let coef = gij * s.others[f];
                    for t in 0..fac.n_params() {
                        dparams[offsets[f] + t] += coef * s.dtheta[f][t];
                    }
                    if let Some(da) = da.as_deref_mut() {
                        for c in 0..d {
                            da[(i, c)] += coef * s.dx1[f][c];
                        }
                    }
                    if let Some(db) = db.as_deref_mut() {
                        for c in 0..d {
                            db[(j, c)] += coef * s.dx2[f][c];
                        }
                    }
                }
            }
        }
    }

    fn backward_diag(&self, a: &DMatrix<f64>, g: &DVector<f64>, dparams: &mut [f64]) {
        let d = a.ncols();
        let ra = rows(a);
        let offsets = self.param_offsets();
        let mut s = ProductScratch::new(self.factors.len(), d);
        for i in 0..a.nrows() {
            if g[i] == 0.0 {
                continue;
            }
            let x = &ra[i * d..(i + 1) * d];
            self.entry_grad(x, x, &mut s);
            for (f, fac) in self.factors.iter().enumerate() {
                let coef = g[i] * s.others[f];
                for t in 0..fac.n_params() {
                    dparams[offsets[f] + t] += coef * s.dtheta[f][t];
                }
            }
        }
    }
}

/// `k̃(x, x') = Σ_i w_i² k_i(x, x')` with `w_i = exp(log_w_i)`.
///
/// Parameters are `[log_w_1..log_w_m, θ(k_1).., θ(k_m)..]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSum {
    pub terms: Vec<KernelExpr>,
    pub log_w: Vec<f64>,
}

impl WeightedSum {
    pub fn new(terms: Vec<KernelExpr>, weights: &[f64]) -> Self {
        WeightedSum { terms, log_w: weights.iter().map(|w| w.ln()).collect() }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|l| l.exp()).collect()
    }
}

impl Covariance for WeightedSum {
    fn n_params(&self) -> usize {
        self.terms.len() + self.terms.iter().map(Covariance::n_params).sum::<usize>()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.log_w.clone();
        for t in &self.terms {
            p.extend(t.params());
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let m = self.terms.len();
        self.log_w.copy_from_slice(&p[..m]);
        let mut off = m;
        for t in &mut self.terms {
            let n = t.n_params();
            t.set_params(&p[off..off + n]);
            off += n;
        }
    }

    fn eval(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.terms.iter().zip(&self.log_w).map(|(t, lw)| (2.0 * lw).exp() * t.value(x1, x2)).sum()
    }

    fn backward(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        g: &DMatrix<f64>,
        dparams: &mut [f64],
        mut da: Option<&mut DMatrix<f64>>,
        mut db: Option<&mut DMatrix<f64>>,
    ) {
        let m = self.terms.len();
        let mut off = m;
        for (i, t) in self.terms.iter().enumerate() {
            let w2 = (2.0 * self.log_w[i]).exp();
            let k = t.gram(a, b);
            dparams[i] += 2.0 * w2 * crate::linalg::frob_dot(&k, g);
            let n = t.n_params();
            let gw = g * w2;
            t.backward(a, b, &gw, &mut dparams[off..off + n], da.as_deref_mut(), db.as_deref_mut());
            off += n;
        }
    }

    fn backward_diag(&self, a: &DMatrix<f64>, g: &DVector<f64>, dparams: &mut [f64]) {
        let m = self.terms.len();
        let mut off = m;
        for (i, t) in self.terms.iter().enumerate() {
            let w2 = (2.0 * self.log_w[i]).exp();
            dparams[i] += 2.0 * w2 * t.diag(a).dot(g);
            let n = t.n_params();
            t.backward_diag(a, &(g * w2), &mut dparams[off..off + n]);
            off += n;
        }
    }
}

/// Checked Gram matrix `K(A, B)`.
pub fn gram(e: &KernelExpr, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!("column counts {} and {}", a.ncols(), b.ncols())));
    }
    e.validate(Some(a.ncols()))?;
    Ok(e.gram(a, b))
}

/// The pool of candidate kernels `k_1..k_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelPool {
    pub members: Vec<KernelExpr>,
}

impl KernelPool {
    pub fn new(members: Vec<KernelExpr>) -> Self {
        KernelPool { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn validate(&self, input_dim: Option<usize>) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::InvalidArgument("empty kernel pool".into()));
        }
        self.members.iter().try_for_each(|m| m.validate(input_dim))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a pool from its JSON array form.
    pub fn from_json(s: &str) -> Result<Self> {
        let pool: KernelPool = serde_json::from_str(s)?;
        pool.validate(None)?;
        Ok(pool)
    }
}

/// Which structures and initialization schemes make up the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub structures: Vec<Vec<BaseKind>>,
    pub schemes: Vec<InitScheme>,
}

impl Default for PoolConfig {
    /// Twelve order-≤2 structures under both schemes (24 members).
    fn default() -> Self {
        use BaseKind::*;
        PoolConfig {
            structures: vec![
                vec![SE],
                vec![LIN],
                vec![PER],
                vec![SE, SE],
                vec![SE, LIN],
                vec![SE, PER],
                vec![LIN, LIN],
                vec![LIN, PER],
                vec![PER, PER],
                vec![LIN, SE],
                vec![PER, SE],
                vec![PER, LIN],
            ],
            schemes: vec![InitScheme::Weak, InitScheme::Strong],
        }
    }
}

impl PoolConfig {
    pub fn order_one() -> Self {
        use BaseKind::*;
        PoolConfig {
            structures: vec![vec![SE], vec![LIN], vec![PER]],
            schemes: vec![InitScheme::Weak, InitScheme::Strong],
        }
    }
}

/// Enumerates `structures × schemes` with default hyperparameters; call
/// [`initialize_pool`] to set data-dependent values.
pub fn build_pool(config: &PoolConfig) -> Result<KernelPool> {
    let mut members = Vec::new();
    for scheme in &config.schemes {
        for s in &config.structures {
            if s.is_empty() || s.len() > MAX_POOL_ORDER {
                return Err(Error::Config(format!(
                    "pool structure of order {} (allowed 1..={MAX_POOL_ORDER})",
                    s.len()
                )));
            }
            let factors = s.iter().map(|&k| BaseKernel::default_of(k)).collect();
            members.push(KernelExpr::new(factors, *scheme));
        }
    }
    Ok(KernelPool::new(members))
}

fn column_range(x: &DMatrix<f64>, dims: &[usize]) -> f64 {
    let r: f64 = dims
        .iter()
        .map(|&d| {
            let c = x.column(d);
            c.max() - c.min()
        })
        .sum::<f64>()
        / dims.len().max(1) as f64;
    if r.is_finite() && r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Median pairwise Euclidean distance over `dims`, using at most the first
/// 400 rows.
fn median_distance(x: &DMatrix<f64>, dims: &[usize]) -> f64 {
    let n = x.nrows().min(400);
    let mut ds = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            let r2: f64 = dims.iter().map(|&d| (x[(i, d)] - x[(j, d)]).powi(2)).sum();
            ds.push(r2.sqrt());
        }
    }
    ds.retain(|v| *v > 0.0);
    if ds.is_empty() {
        return 1.0;
    }
    ds.sort_by(f64::total_cmp);
    ds[ds.len() / 2]
}

/// Period with maximal power of a direct periodogram of `y` on the
/// (possibly irregular) 1-D inputs `x`.
pub fn dominant_period(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return None;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let f_min = 1.0 / range;
    let f_max = 0.5 * n as f64 / range;
    let steps = 8 * n;
    let mut best = (0.0, None);
    for s in 0..=steps {
        let f = f_min + (f_max - f_min) * s as f64 / steps as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let a = 2.0 * PI * f * xi;
            re += (yi - mean) * a.cos();
            im += (yi - mean) * a.sin();
        }
        let p = re * re + im * im;
        if p > best.0 {
            best = (p, Some(1.0 / f));
        }
    }
    best.1
}

/// Sets pool hyperparameters from data.
///
/// Weak members draw `ℓ` log-uniformly from `[0.1, 2]×range` and `p` from
/// `[0.05, 0.5]×range`; Strong members use the median pairwise distance for
/// `ℓ` and, for 1-D inputs, the dominant periodogram period for `p`. LIN
/// offsets start at the input mean.
pub fn initialize_pool(pool: &mut KernelPool, x: &DMatrix<f64>, y: &DVector<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..x.ncols()).collect();
    let period_1d = if x.ncols() == 1 { dominant_period(x.column(0).as_slice(), y.as_slice()) } else { None };
    for member in &mut pool.members {
        let scheme = member.init_scheme;
        for f in &mut member.factors {
            let dims = f.dims().map(<[usize]>::to_vec).unwrap_or_else(|| all.clone());
            let range = column_range(x, &dims);
            let med = median_distance(x, &dims);
            let mean = dims.iter().map(|&d| x.column(d).mean()).sum::<f64>() / dims.len().max(1) as f64;
            let mut log_uniform = |lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
            match f {
                BaseKernel::SE { lengthscale, .. } => {
                    *lengthscale = match scheme {
                        InitScheme::Weak => log_uniform(0.1, 2.0) * range,
                        InitScheme::Strong => med,
                    }
                }
                BaseKernel::PER { lengthscale, period, .. } => match scheme {
                    InitScheme::Weak => {
                        *lengthscale = log_uniform(0.1, 2.0) * range;
                        *period = log_uniform(0.05, 0.5) * range;
                    }
                    InitScheme::Strong => {
                        *lengthscale = 1.0;
                        *period = period_1d.filter(|_| dims.len() == 1).unwrap_or(med);
                    }
                },
                BaseKernel::LIN { offset, .. } => *offset = if mean.is_finite() { mean } else { 0.0 },
            }
        }
    }
}

/// The `d`-order additive decomposition of a `D`-dimensional input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveSpec {
    pub input_dim: usize,
    pub order: usize,
    /// 0-based, strictly increasing, lexicographically ordered.
    pub subsets: Vec<Vec<usize>>,
}

impl AdditiveSpec {
    /// One product of 1-D SE kernels per subset.
    pub fn pool(&self, lengthscale: f64) -> KernelPool {
        let members = self
            .subsets
            .iter()
            .map(|s| {
                KernelExpr::new(
                    s.iter().map(|&d| BaseKernel::se(lengthscale).with_dims(vec![d])).collect(),
                    InitScheme::Strong,
                )
            })
            .collect();
        KernelPool::new(members)
    }
}

/// All `C(D, d)` dimension subsets in lexicographic order.
pub fn additive_terms(input_dim: usize, order: usize) -> Result<AdditiveSpec> {
    if order == 0 || order > input_dim {
        return Err(Error::InvalidArgument(format!("additive order {order} for input dimension {input_dim}")));
    }
    let subsets = (0..input_dim).combinations(order).collect();
    Ok(AdditiveSpec { input_dim, order, subsets })
}

fn dims_suffix(e: &KernelExpr) -> String {
    let mut dims: Vec<usize> = e.factors.iter().filter_map(|f| f.dims()).flatten().copied().collect();
    if dims.is_empty() {
        return String::new();
    }
    dims.sort_unstable();
    dims.dedup();
    format!(" on input dimension{} {}", if dims.len() > 1 { "s" } else { "" }, dims.iter().join(", "))
}

fn hyper_text(f: &BaseKernel) -> String {
    match *f {
        BaseKernel::SE { lengthscale, .. } => format!("lengthscale {lengthscale:.3}"),
        BaseKernel::LIN { offset, .. } => format!("offset {offset:.3}"),
        BaseKernel::PER { lengthscale, period, .. } => format!("period {period:.3}, lengthscale {lengthscale:.3}"),
    }
}

/// Templated natural-language description of a pool member.
pub fn describe(e: &KernelExpr) -> String {
    use BaseKind::*;
    let mut kinds = e.kinds();
    kinds.sort_by_key(|k| match k {
        SE => 0,
        LIN => 1,
        PER => 2,
    });
    let phrase = match kinds.as_slice() {
        [SE] => "a smoothly varying component".to_string(),
        [LIN] => "a linear trend".to_string(),
        [PER] => "a periodic component".to_string(),
        [SE, SE] => "a smoothly varying component at two interacting scales".to_string(),
        [SE, LIN] => "a smoothly varying component whose amplitude grows linearly".to_string(),
        [SE, PER] => "a periodic component whose shape varies smoothly".to_string(),
        [LIN, LIN] => "a quadratic trend".to_string(),
        [LIN, PER] => "a periodic component whose amplitude grows linearly".to_string(),
        [PER, PER] => "a product of two periodic components".to_string(),
        _ => format!("an interaction of {} components", kinds.len()),
    };
    let hyper = e.factors.iter().map(hyper_text).join("; ");
    format!("{phrase} ({hyper}){}", dims_suffix(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_at_zero_distance_is_one() {
        assert_eq!(eval_base(&BaseKernel::se(0.7), &[1.5, -2.0], &[1.5, -2.0]).unwrap(), 1.0);
    }

    #[test]
    fn per_at_exact_period_is_one() {
        let v = eval_base(&BaseKernel::per(0.8, 2.5), &[0.0], &[2.5]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn per_multi_dim_is_product_and_psd() {
        let k = BaseKernel::per(0.9, 1.7);
        let (a, b) = ([0.3, -1.2], [1.1, 0.4]);
        let prod = eval_base(&k, &[a[0]], &[b[0]]).unwrap() * eval_base(&k, &[a[1]], &[b[1]]).unwrap();
        assert!((eval_base(&k, &a, &b).unwrap() - prod).abs() < 1e-15);
        assert!((eval_base(&k, &a, &[a[0] + 3.0 * 1.7, a[1]]).unwrap() - 1.0).abs() < 1e-12);
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 13) % 17) as f64 * 0.37);
        let g = KernelExpr::single(k).gram(&x, &x);
        assert!(crate::linalg::eigh_desc(&g).0.min() > -1e-10);
    }

    #[test]
    fn lin_inner_product() {
        assert_eq!(eval_base(&BaseKernel::lin(0.0), &[2.0], &[3.0]).unwrap(), 6.0);
    }

    #[test]
    fn base_errors() {
        assert!(matches!(eval_base(&BaseKernel::se(1.0), &[0.0], &[0.0, 1.0]), Err(Error::Dimension(_))));
        assert!(matches!(
            eval_base(&BaseKernel::se(0.0), &[0.0], &[0.0]),
            Err(Error::InvalidHyperparameter(_))
        ));
        assert!(matches!(
            eval_base(&BaseKernel::per(1.0, -1.0), &[0.0], &[0.0]),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn expr_products() {
        let se = KernelExpr::single(BaseKernel::se(0.3));
        assert_eq!(eval_expr(&se, &[0.1], &[0.4]).unwrap(), BaseKernel::se(0.3).value(&[0.1], &[0.4]));
        let sp = KernelExpr::product(BaseKernel::se(1.0), BaseKernel::per(1.0, 2.0));
        assert_eq!(eval_expr(&sp, &[0.3], &[0.3]).unwrap(), 1.0);
        let ll = KernelExpr::product(BaseKernel::lin(0.0), BaseKernel::lin(0.0));
        assert_eq!(eval_expr(&ll, &[2.0], &[3.0]).unwrap(), 36.0);
    }

    #[test]
    fn gram_se_two_points() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let k = gram(&KernelExpr::single(BaseKernel::se(1.0)), &x, &x).unwrap();
        let e = (-0.5f64).exp();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, e, e, 1.0]);
        assert!((k - expect).abs().max() < 1e-15);
    }

    #[test]
    fn gram_single_point_and_mismatch() {
        let x = DMatrix::from_row_slice(1, 2, &[0.5, 1.0]);
        let e = KernelExpr::single(BaseKernel::lin(0.0));
        let k = gram(&e, &x, &x).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 1.25);
        let y = DMatrix::from_row_slice(1, 1, &[0.5]);
        assert!(gram(&e, &x, &y).is_err());
    }

    #[test]
    fn pool_counts() {
        let pool = build_pool(&PoolConfig::default()).unwrap();
        assert_eq!(pool.len(), 24);
        assert!(pool.members.iter().all(|m| m.factors.len() <= 2));
        assert_eq!(build_pool(&PoolConfig::order_one()).unwrap().len(), 6);
        let bad = PoolConfig { structures: vec![vec![BaseKind::SE; 3]], schemes: vec![InitScheme::Weak] };
        assert!(build_pool(&bad).is_err());
    }

    #[test]
    fn additive_counts() {
        assert_eq!(additive_terms(13, 1).unwrap().subsets.len(), 13);
        assert_eq!(additive_terms(6, 3).unwrap().subsets.len(), 20);
        assert_eq!(additive_terms(8, 6).unwrap().subsets.len(), 28);
        assert!(additive_terms(3, 4).is_err());
        assert!(additive_terms(3, 0).is_err());
        let s = additive_terms(4, 2).unwrap();
        assert_eq!(s.subsets[0], vec![0, 1]);
        assert_eq!(s.subsets[5], vec![2, 3]);
    }

    #[test]
    fn descriptions() {
        assert!(describe(&KernelExpr::single(BaseKernel::se(1.0))).starts_with("a smoothly varying component"));
        assert!(describe(&KernelExpr::single(BaseKernel::lin(0.0))).starts_with("a linear trend"));
        let per = describe(&KernelExpr::single(BaseKernel::per(1.0, 1.001)));
        assert!(per.contains("period 1.001"), "{per}");
        let ps = describe(&KernelExpr::product(BaseKernel::per(1.0, 2.0), BaseKernel::se(1.0)));
        assert!(ps.starts_with("a periodic component whose shape varies smoothly"));
    }

    #[test]
    fn pool_json_round_trip() {
        let pool = build_pool(&PoolConfig::default()).unwrap();
        let back = KernelPool::from_json(&pool.to_json().unwrap()).unwrap();
        assert_eq!(pool, back);
        let lin = serde_json::to_value(BaseKernel::lin(0.5)).unwrap();
        assert_eq!(lin, serde_json::json!({"kind": "LIN", "offset": 0.5}));
        assert!(KernelPool::from_json(r#"[{"factors":[{"kind":"SE","lengthscale":-1}],"init_scheme":"Weak"}]"#).is_err());
    }

    #[test]
    fn dominant_period_finds_sine() {
        let x: Vec<f64> = (0..120).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| (2.0 * PI * v / 1.5).sin()).collect();
        let p = dominant_period(&x, &y).unwrap();
        assert!((p - 1.5).abs() < 0.05, "{p}");
    }

    #[test]
    fn initialization_respects_ranges() {
        let x = DMatrix::from_fn(50, 1, |i, _| i as f64 * 0.2);
        let y = DVector::from_fn(50, |i, _| (i as f64).sin());
        let mut pool = build_pool(&PoolConfig::default()).unwrap();
        initialize_pool(&mut pool, &x, &y, 3);
        pool.validate(Some(1)).unwrap();
        let range = 49.0 * 0.2;
        for m in pool.members.iter().filter(|m| m.init_scheme == InitScheme::Weak) {
            for f in &m.factors {
                if let BaseKernel::PER { period, .. } = f {
                    assert!(*period >= 0.05 * range - 1e-12 && *period <= 0.5 * range + 1e-12);
                }
            }
        }
    }

    fn fd_check(cov: &mut dyn Covariance, a: &DMatrix<f64>, b: &DMatrix<f64>) {
        let g = DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut dp = vec![0.0; cov.n_params()];
        let mut da = DMatrix::zeros(a.nrows(), a.ncols());
        let mut db = DMatrix::zeros(b.nrows(), b.ncols());
        cov.backward(a, b, &g, &mut dp, Some(&mut da), Some(&mut db));
        let f = |c: &dyn Covariance, a: &DMatrix<f64>, b: &DMatrix<f64>| crate::linalg::frob_dot(&c.gram(a, b), &g);
        let h = 1e-6;
        let p0 = cov.params();
        for t in 0..p0.len() {
            let mut p = p0.clone();
            p[t] += h;
            cov.set_params(&p);
            let up = f(cov, a, b);
            p[t] -= 2.0 * h;
            cov.set_params(&p);
            let dn = f(cov, a, b);
            cov.set_params(&p0);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dp[t]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {t}: {fd} vs {}", dp[t]);
        }
        for i in 0..a.nrows() {
            for c in 0..a.ncols() {
                let mut ap = a.clone();
                ap[(i, c)] += h;
                let up = f(cov, &ap, b);
                ap[(i, c)] -= 2.0 * h;
                let dn = f(cov, &ap, b);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - da[(i, c)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
        for j in 0..b.nrows() {
            for c in 0..b.ncols() {
                let mut bp = b.clone();
                bp[(j, c)] += h;
                let up = f(cov, a, &bp);
                bp[(j, c)] -= 2.0 * h;
                let dn = f(cov, a, &bp);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - db[(j, c)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let a = DMatrix::from_fn(4, 2, |i, j| 0.3 * i as f64 - 0.7 * j as f64 + 0.1);
        let b = DMatrix::from_fn(3, 2, |i, j| -0.4 * i as f64 + 0.5 * j as f64 + 0.2);
        let mut e = KernelExpr::product(BaseKernel::se(0.9), BaseKernel::per(1.3, 1.7));
        fd_check(&mut e, &a, &b);
        let mut e = KernelExpr::product(BaseKernel::lin(0.2), BaseKernel::se(1.1).with_dims(vec![1]));
        fd_check(&mut e, &a, &b);
        let mut s = WeightedSum::new(
            vec![KernelExpr::single(BaseKernel::per(0.8, 2.0)), KernelExpr::single(BaseKernel::lin(-0.3))],
            &[0.7, 1.4],
        );
        fd_check(&mut s, &a, &b);
    }

    #[test]
    fn backward_diag_matches_finite_differences() {
        let a = DMatrix::from_fn(3, 1, |i, _| i as f64 * 0.4 - 0.3);
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut e = KernelExpr::product(BaseKernel::lin(0.3), BaseKernel::lin(-0.2));
        let mut dp = vec![0.0; 2];
        e.backward_diag(&a, &g, &mut dp);
        let p0 = e.params();
        for t in 0..2 {
            let mut p = p0.clone();
            p[t] += 1e-6;
            e.set_params(&p);
            let up = e.diag(&a).dot(&g);
            p[t] -= 2e-6;
            e.set_params(&p);
            let dn = e.diag(&a).dot(&g);
            e.set_params(&p0);
            assert!(((up - dn) / 2e-6 - dp[t]).abs() < 1e-6);
        }
    }
}
