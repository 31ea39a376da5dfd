//! Run configuration: one JSON file with a section per stage. Missing keys
//! take built-in defaults; the resolved value is echoed into every run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{MistError, Result};
use crate::eval::ProbeConfig;
use crate::io;
use crate::models::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub tokens: Option<usize>,
    /// Sets the dataset, pretraining and training seeds together.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MistError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_json(&io::read_to_string(path)?)
            .map_err(|e| MistError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// File if given, defaults otherwise, then `overrides` on top.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(k) = o.tokens {
            self.model.tokens = k;
        }
        if let Some(s) = o.seed {
            self.dataset.seed = s;
            self.train.pretrain_seed = s;
            self.train.train_seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab != self.dataset.vocab || self.model.frame_dim != self.dataset.frame_dim {
            return Err(MistError::Config(format!(
                "model (vocab {}, frame_dim {}) does not match dataset (vocab {}, frame_dim {})",
                self.model.vocab, self.model.frame_dim, self.dataset.vocab, self.dataset.frame_dim
            )));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
