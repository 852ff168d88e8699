use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mlsa;
use crate::tensor::Tensor;

use super::{AdamState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptSnapshot {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Versioned snapshot of parameters, optimizer moments and the config
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub tensors: BTreeMap<String, TensorData>,
    pub opt: OptSnapshot,
    pub epoch: usize,
    pub val_metric: Option<f64>,
}

#[derive(Deserialize)]
struct Header {
    version: u32,
}

impl Checkpoint {
    pub fn capture(
        model: &Mlsa,
        opt: &AdamState,
        config: &TrainConfig,
        epoch: usize,
        val_metric: Option<f64>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, (name, t)) in model.params.iter().enumerate() {
            tensors.insert(
                name.to_string(),
                TensorData {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
            if let (Some(mk), Some(vk)) = (opt.m.get(k), opt.v.get(k)) {
                m.insert(name.to_string(), mk.clone());
                v.insert(name.to_string(), vk.clone());
            }
        }
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            tensors,
            opt: OptSnapshot {
                step: opt.step,
                m,
                v,
            },
            epoch,
            val_metric,
        }
    }

    /// Rebuilds the model described by the stored config and tensors.
    pub fn model(&self) -> Result<Mlsa> {
        let mut model = Mlsa::new(self.config.model_config(), self.config.seed)?;
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                Tensor::new(t.shape.clone(), t.data.clone())
                    .map(|x| (k.clone(), x))
                    .map_err(|e| Error::Checkpoint(format!("tensor {k}: {e}")))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        model.load_tensors(&tensors)?;
        Ok(model)
    }

    /// Optimizer state aligned with `model`'s parameter order.
    pub fn adam_state(&self, model: &Mlsa) -> Result<AdamState> {
        let mut state = AdamState {
            step: self.opt.step,
            m: Vec::with_capacity(model.params.len()),
            v: Vec::with_capacity(model.params.len()),
        };
        for (name, t) in model.params.iter() {
            let (Some(m), Some(v)) = (self.opt.m.get(name), self.opt.v.get(name)) else {
                return Err(Error::Checkpoint(format!(
                    "missing optimizer state for {name}"
                )));
            };
            if m.len() != t.numel() || v.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} has the wrong size"
                )));
            }
            state.m.push(m.clone());
            state.v.push(v.clone());
        }
        Ok(state)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Mlsa, TrainConfig) {
        let cfg = TrainConfig {
            hidden: Some(4),
            mpn_layers: Some(1),
            ..TrainConfig::default()
        };
        (Mlsa::new(cfg.model_config(), 5).unwrap(), cfg)
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (model, cfg) = tiny();
        let opt = AdamState::for_params(&model.params);
        let ck = Checkpoint::capture(&model, &opt, &cfg, 3, Some(0.1 + 0.2));
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.model().unwrap().params, model.params);
    }

    #[test]
    fn version_and_truncation_errors() {
        let (model, cfg) = tiny();
        let ck = Checkpoint::capture(&model, &AdamState::for_params(&model.params), &cfg, 0, None);
        let text = ck.to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2]),
            Err(Error::Checkpoint(_))
        ));
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        let err = Checkpoint::from_json(&bumped).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (model, cfg) = tiny();
        let mut ck =
            Checkpoint::capture(&model, &AdamState::for_params(&model.params), &cfg, 0, None);
        ck.config.hidden = Some(5);
        assert!(ck.model().is_err());
    }
}
