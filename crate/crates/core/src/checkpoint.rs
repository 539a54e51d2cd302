//! JSON model checkpoints.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{Standardizer, Task};
use crate::error::{Error, Result};
use crate::pipeline::AnyModel;

pub const FORMAT: &str = "shrinkgp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub task: Task,
    pub input_columns: Vec<String>,
    pub target_column: String,
    pub standardizer: Standardizer,
    pub model: AnyModel,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, model: AnyModel, standardizer: Standardizer, input_columns: Vec<String>, target_column: String) -> Result<Self> {
        let ck = Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: config.hash()?,
            config: config.clone(),
            task: config.task,
            input_columns,
            target_column,
            standardizer,
            model,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::InvalidArgument(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        self.config.validate()?;
        if self.config.hash()? != self.config_hash {
            return Err(Error::InvalidArgument("checkpoint config hash does not match its config".into()));
        }
        self.model.validate()?;
        let d = self.model.input_dim();
        let st = &self.standardizer;
        if self.input_columns.len() != d || st.x_mean.len() != d || st.x_std.len() != d {
            return Err(Error::Dimension("checkpoint columns or transform disagree with the model".into()));
        }
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !st.x_std.iter().all(|v| finite_pos(*v)) || !finite_pos(st.y_std) || !st.x_mean.iter().chain([&st.y_mean]).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("checkpoint transform must be finite with positive scales".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{run_synth, SynthSpec};
    use crate::pipeline::build_model;

    fn checkpoint() -> Checkpoint {
        let ds = run_synth(&SynthSpec { n: 20, ..Default::default() }).unwrap().dataset;
        let mut cfg = RunConfig::default();
        cfg.pool.structures = Some(vec!["SE".into(), "PER".into()]);
        cfg.inducing.count = Some(5);
        let model = build_model(&cfg, &ds).unwrap();
        Checkpoint::new(&cfg, model, Standardizer::identity(1), ds.input_columns.clone(), ds.target_column.clone()).unwrap()
    }

    #[test]
    fn round_trip() {
        let ck = checkpoint();
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    }

    #[test]
    fn tampering_is_detected() {
        let ck = checkpoint();
        let mut bad = ck.clone();
        bad.config.seed += 1;
        assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = ck.clone();
        bad.standardizer.y_std = 0.0;
        assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
        let text = ck.to_json().unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(Checkpoint::from_json(&text).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
