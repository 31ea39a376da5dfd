//! JSON checkpoints.
//!
//! One flat JSON object: every parameter name maps to
//! `{"shape": [..], "values": [..]}` (row-major), next to two reserved keys,
//! `"config"` (the full run configuration) and `"rng_state"` (named stream
//! positions).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::Tensor;
use crate::error::{MistError, Result};
use crate::io;
use crate::nn::Module;
use crate::rng::RngState;

pub const CONFIG_KEY: &str = "config";
pub const RNG_KEY: &str = "rng_state";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub config: Value,
    pub rng_state: BTreeMap<String, RngState>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Checkpoint {
            config,
            ..Checkpoint::default()
        }
    }

    pub fn add_module(&mut self, m: &dyn Module) {
        for (name, t) in m.named_params() {
            self.params.insert(name, t.clone());
        }
    }

    pub fn add_rng(&mut self, name: &str, state: RngState) {
        self.rng_state.insert(name.to_string(), state);
    }

    /// `(name, tensor)` pairs for [`Module::load_params`].
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn load_into(&self, m: &mut dyn Module) -> Result<()> {
        m.load_params(&self.entries())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut map = Map::new();
        for (name, t) in &self.params {
            let rec = ParamRecord {
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            };
            map.insert(name.clone(), serde_json::to_value(rec)?);
        }
        map.insert(CONFIG_KEY.to_string(), self.config.clone());
        map.insert(RNG_KEY.to_string(), serde_json::to_value(&self.rng_state)?);
        io::to_json_pretty(&Value::Object(map))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let Value::Object(mut map) = serde_json::from_str(text)? else {
            return Err(MistError::Checkpoint("top level is not an object".into()));
        };
        let config = map.remove(CONFIG_KEY).unwrap_or(Value::Null);
        let rng_state = match map.remove(RNG_KEY) {
            Some(v) => serde_json::from_value(v)?,
            None => BTreeMap::new(),
        };
        let mut params = BTreeMap::new();
        for (name, v) in map {
            let rec: ParamRecord = serde_json::from_value(v)
                .map_err(|e| MistError::Checkpoint(format!("parameter {name}: {e}")))?;
            let t = Tensor::new(rec.shape, rec.values)
                .map_err(|e| MistError::Checkpoint(format!("parameter {name}: {e}")))?;
            params.insert(name, t);
        }
        Ok(Checkpoint {
            params,
            config,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&io::read_to_string(path)?)
    }
}
