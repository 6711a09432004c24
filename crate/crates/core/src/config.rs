//! The run configuration: every setting of the pipeline in one JSON
//! document. Missing sections and fields take their defaults; unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::EvalConfig;
use crate::scenegen::SceneGenConfig;
use crate::training::{FitConfig, LossConfig, MatchConfig, ModelConfig, TrainConfig};
use crate::{Error, Result};

/// Overrides both the scene and the training seed when set.
pub const SEED_ENV: &str = "P2S_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenegen: SceneGenConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub matcher: MatchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
            self.scenegen.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scenegen.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.matcher.similarity.validate()?;
        if !(self.matcher.prune_radius > 0.0) {
            return Err(Error::Config("prune_radius must be positive".into()));
        }
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.decoder.classes != self.scenegen.classes.len() {
            return Err(Error::Config(format!(
                "model has {} classes but scenegen defines {}",
                self.model.decoder.classes,
                self.scenegen.classes.len()
            )));
        }
        if self.model.grid.extent != self.scenegen.extent {
            return Err(Error::Config("model grid extent differs from the scene extent".into()));
        }
        Ok(())
    }

    pub fn fit_config(&self, threads: usize) -> FitConfig<'_> {
        FitConfig {
            model: &self.model,
            loss: &self.loss,
            matcher: &self.matcher,
            train: &self.train,
            threads,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.scenegen.class_names()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
