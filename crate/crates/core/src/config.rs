//! Run configuration (JSON) shared by the library pipeline and the CLI.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, Task};
use crate::error::{Error, Result};
use crate::kernel::{BaseKind, InitScheme, KernelPool, PoolConfig, MAX_POOL_ORDER};
use crate::trainer::TrainingConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One inducing group per pool kernel.
    #[default]
    Multisvgp,
    /// One inducing group under the summed kernel.
    Svgp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    Horseshoe,
    /// Point weights trained without a weight prior.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    /// Structures such as `"SE"` or `"SE*PER"`; default: the 12 order-≤2 products.
    pub structures: Option<Vec<String>>,
    pub schemes: Vec<InitScheme>,
    /// Use the `d`-order additive SE decomposition instead of structures.
    pub additive_order: Option<usize>,
    /// An explicit pool, used verbatim (no data-driven initialization).
    pub members: Option<KernelPool>,
    pub model: ModelKind,
    pub prior: Prior,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            structures: None,
            schemes: vec![InitScheme::Weak, InitScheme::Strong],
            additive_order: None,
            members: None,
            model: ModelKind::Multisvgp,
            prior: Prior::Horseshoe,
        }
    }
}

/// Parses `"SE"`, `"LIN*PER"`, … into base kinds.
pub fn parse_structure(s: &str) -> Result<Vec<BaseKind>> {
    let kinds = s
        .split(['*', '×'])
        .map(|t| match t.trim().to_ascii_uppercase().as_str() {
            "SE" => Ok(BaseKind::SE),
            "LIN" => Ok(BaseKind::LIN),
            "PER" => Ok(BaseKind::PER),
            other => Err(Error::Config(format!("unknown base kernel {other:?} in {s:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() || kinds.len() > MAX_POOL_ORDER {
        return Err(Error::Config(format!("structure {s:?} must have 1..={MAX_POOL_ORDER} factors")));
    }
    Ok(kinds)
}

impl PoolSection {
    pub fn pool_config(&self) -> Result<PoolConfig> {
        let mut cfg = PoolConfig::default();
        if let Some(st) = &self.structures {
            cfg.structures = st.iter().map(|s| parse_structure(s)).collect::<Result<_>>()?;
        }
        cfg.schemes = self.schemes.clone();
        if cfg.structures.is_empty() || cfg.schemes.is_empty() {
            return Err(Error::Config("empty kernel pool".into()));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorseshoeSection {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

impl Default for HorseshoeSection {
    fn default() -> Self {
        HorseshoeSection { a: 1.0, b: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InducingSection {
    /// Points per group; default 100 for 1-D inputs and 200 otherwise,
    /// capped at the training size.
    pub count: Option<usize>,
}

impl InducingSection {
    pub fn resolve(&self, input_dim: usize, n: usize) -> usize {
        self.count.unwrap_or(if input_dim == 1 { 100 } else { 200 }).min(n)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pool: PoolSection,
    pub training: TrainingConfig,
    pub horseshoe: HorseshoeSection,
    pub inducing: InducingSection,
    pub split: SplitSpec,
    pub seed: u64,
    pub task: Task,
    /// Target column name; default: the last column.
    pub target: Option<String>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let hs = self.horseshoe;
        if !(hs.a > 0.0 && hs.a.is_finite() && hs.b > 0.0 && hs.b.is_finite()) {
            return Err(Error::Config("Horseshoe scales A and B must be positive".into()));
        }
        if self.inducing.count == Some(0) {
            return Err(Error::Config("inducing count must be positive".into()));
        }
        if let SplitSpec::Random { fraction, .. } = self.split {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) || t.mc_samples_eval == 0 {
            return Err(Error::Config("training needs positive batch size, learning rate and mc_samples_eval".into()));
        }
        if let Some(v) = t.noise_init {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("initial noise variance {v}")));
            }
        }
        let expected = match self.task {
            Task::Regression => crate::trainer::LikelihoodKind::Gaussian,
            Task::Classification => crate::trainer::LikelihoodKind::Bernoulli,
        };
        if t.likelihood != expected {
            return Err(Error::Config(format!("{:?} task with {:?} likelihood", self.task, t.likelihood)));
        }
        if self.pool.members.is_none() && self.pool.additive_order.is_none() {
            self.pool.pool_config()?;
        }
        if let Some(p) = &self.pool.members {
            if p.is_empty() {
                return Err(Error::Config("explicit pool is empty".into()));
            }
            p.validate(None).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.pool.additive_order == Some(0) {
            return Err(Error::Config("additive order must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical (compact) JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.pool.pool_config().unwrap().structures.len(), 12);
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_json(
            r#"{"pool": {"structures": ["SE", "se*per"], "prior": "none"},
                "horseshoe": {"A": 2.0, "B": 0.5},
                "inducing": {"count": 30},
                "split": {"mode": "PcaExtrapolation"},
                "training": {"iterations": 5, "batch_size": 10},
                "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(c.pool.prior, Prior::None);
        assert_eq!(c.pool.pool_config().unwrap().structures[1], vec![BaseKind::SE, BaseKind::PER]);
        assert_eq!(c.horseshoe.a, 2.0);
        assert_eq!(c.inducing.resolve(1, 20), 20);
        assert_eq!(c.split, SplitSpec::PcaExtrapolation);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for bad in [
            r#"{"unknown": 1}"#,
            r#"{"pool": {"structures": ["SE*SE*SE"]}}"#,
            r#"{"pool": {"structures": ["RBF"]}}"#,
            r#"{"horseshoe": {"A": 0}}"#,
            r#"{"task": "Classification"}"#,
            r#"{"split": {"mode": "Random", "fraction": 1.5, "seed": 0}}"#,
            "[",
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
