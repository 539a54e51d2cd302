//! Model construction, fitting, prediction and evaluation from a
//! [`RunConfig`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bound::subset_rows;
use crate::config::{ModelKind, Prior, RunConfig};
use crate::data::{class_probabilities, classification_metrics, regression_metrics, Dataset, Metrics, Standardizer, Task};
use crate::error::{Error, Result};
use crate::horseshoe::HorseshoeState;
use crate::kernel::{additive_terms, build_pool, initialize_pool, KernelPool, WeightedSum};
use crate::multisvgp::{init_groups, prior_group, Likelihood, MultiSvgp, SvgpBaseline, Weights};
use crate::trainer::{predict_latent, predict_latent_baseline, train, ElboBreakdown, TrainingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "state")]
pub enum AnyModel {
    MultiSvgp(MultiSvgp),
    Svgp(SvgpBaseline),
}

impl AnyModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnyModel::MultiSvgp(m) => m.validate(),
            AnyModel::Svgp(b) => {
                let d = b.group.z.ncols();
                b.group.validate(d)?;
                for t in &b.kernel.terms {
                    t.validate(Some(d))?;
                }
                if b.kernel.log_w.len() != b.kernel.terms.len() || b.kernel.log_w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("summed-kernel weights".into()));
                }
                if let Likelihood::Gaussian { noise } = b.likelihood {
                    if !(noise > 0.0 && noise.is_finite()) {
                        return Err(Error::InvalidArgument(format!("noise variance {noise}")));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            AnyModel::MultiSvgp(m) => m.input_dim(),
            AnyModel::Svgp(b) => b.group.z.ncols(),
        }
    }

    pub fn likelihood(&self) -> &Likelihood {
        match self {
            AnyModel::MultiSvgp(m) => &m.likelihood,
            AnyModel::Svgp(b) => &b.likelihood,
        }
    }
}

/// The kernel pool for a (standardized) training set.
pub fn make_pool(cfg: &RunConfig, train: &Dataset) -> Result<KernelPool> {
    if let Some(p) = &cfg.pool.members {
        p.validate(Some(train.input_dim()))?;
        return Ok(p.clone());
    }
    let mut pool = match cfg.pool.additive_order {
        Some(d) => additive_terms(train.input_dim(), d)?.pool(1.0),
        None => build_pool(&cfg.pool.pool_config()?)?,
    };
    initialize_pool(&mut pool, &train.x, &train.y, cfg.seed);
    Ok(pool)
}

/// An untrained model at the prior, per the configuration.
pub fn build_model(cfg: &RunConfig, train: &Dataset) -> Result<AnyModel> {
    cfg.validate()?;
    if train.task != cfg.task {
        return Err(Error::Config("dataset task differs from the configured task".into()));
    }
    let pool = make_pool(cfg, train)?;
    let m = pool.len();
    let count = cfg.inducing.resolve(train.input_dim(), train.len());
    let likelihood = match cfg.task {
        Task::Regression => Likelihood::Gaussian { noise: cfg.training.initial_noise(&train.y) },
        Task::Classification => Likelihood::Bernoulli,
    };
    Ok(match cfg.pool.model {
        ModelKind::Multisvgp => {
            let groups = init_groups(&pool, &train.x, count, cfg.seed)?;
            let weights = match cfg.pool.prior {
                Prior::Horseshoe => Weights::Horseshoe(HorseshoeState::new(m, cfg.horseshoe.a, cfg.horseshoe.b)),
                Prior::None => Weights::Point(vec![1.0; m]),
            };
            AnyModel::MultiSvgp(MultiSvgp::new(pool, groups, weights, likelihood)?)
        }
        ModelKind::Svgp => {
            let ones = vec![1.0; m];
            let kernel = WeightedSum::new(pool.members.clone(), &ones);
            let group = prior_group(&kernel, subset_rows(&train.x, count, cfg.seed)?)?;
            AnyModel::Svgp(SvgpBaseline::new(pool, &ones, group, likelihood)?)
        }
    })
}

/// The training configuration actually used: the batch size is capped at
/// the training size and the likelihood follows the task.
pub fn effective_training(cfg: &RunConfig, n: usize) -> TrainingConfig {
    let mut t = cfg.training.clone();
    t.batch_size = t.batch_size.min(n);
    t.seed = cfg.seed;
    t
}

pub struct Fitted {
    pub model: AnyModel,
    pub trace: Vec<ElboBreakdown>,
}

/// Builds and trains a model on a standardized training set.
pub fn fit(cfg: &RunConfig, train_set: &Dataset) -> Result<Fitted> {
    let model = build_model(cfg, train_set)?;
    let t = effective_training(cfg, train_set.len());
    let (model, trace) = match model {
        AnyModel::MultiSvgp(m) => {
            let (m, tr) = train(&m, &train_set.x, &train_set.y, &t)?;
            (AnyModel::MultiSvgp(m), tr)
        }
        AnyModel::Svgp(b) => {
            let (b, tr) = train(&b, &train_set.x, &train_set.y, &t)?;
            (AnyModel::Svgp(b), tr)
        }
    };
    Ok(Fitted { model, trace })
}

/// Predictions in original target units.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Latent mean.
    pub mean: DVector<f64>,
    /// Latent variance.
    pub latent_var: DVector<f64>,
    /// Regression: variance of `y` (noise included). Classification: `P(y = 1)`.
    pub observed: DVector<f64>,
}

/// Predicts at standardized inputs `xs`.
pub fn predict(model: &AnyModel, st: &Standardizer, xs: &DMatrix<f64>, mc_samples: usize, seed: u64) -> Result<Predictions> {
    let (mean, var) = match model {
        AnyModel::MultiSvgp(m) => predict_latent(m, xs, mc_samples, seed)?,
        AnyModel::Svgp(b) => predict_latent_baseline(b, xs)?,
    };
    Ok(match model.likelihood() {
        Likelihood::Gaussian { noise } => {
            let observed = st.inverse_var(&var.map(|v| v + noise));
            Predictions { mean: st.inverse_mean(&mean), latent_var: st.inverse_var(&var), observed }
        }
        Likelihood::Bernoulli => {
            let p = class_probabilities(&mean, &var);
            Predictions { mean, latent_var: var, observed: p }
        }
    })
}

/// Metrics on a standardized test set, reported in original units.
pub fn evaluate(model: &AnyModel, st: &Standardizer, test: &Dataset, mc_samples: usize, seed: u64) -> Result<Metrics> {
    let p = predict(model, st, &test.x, mc_samples, seed)?;
    metrics_from_predictions(model, &st.inverse_mean(&test.y), &p, test.task)
}

pub fn metrics_from_predictions(model: &AnyModel, y_original: &DVector<f64>, p: &Predictions, task: Task) -> Result<Metrics> {
    match (task, model.likelihood()) {
        (Task::Regression, Likelihood::Gaussian { .. }) => regression_metrics(y_original, &p.mean, &p.observed),
        (Task::Classification, Likelihood::Bernoulli) => classification_metrics(y_original, &p.observed),
        _ => Err(Error::Config("task does not match the model likelihood".into())),
    }
}
