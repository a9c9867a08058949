//! Model checkpoints and the gate-free export.

use std::path::Path;

use serde_json::{Map, Value};

use super::config::{AblationMode, ModelConfig};
use super::params::{is_gate_param, validate_params, ParamSet};
use super::Model;
use crate::container::{sha256_hex, Container};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::optim::OptimState;

const KIND: &str = "checkpoint";
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub optimizer: Option<OptimState<f32>>,
    /// Training steps completed.
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, optimizer: Option<OptimState<f32>>, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer,
            step,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        validate_params(&self.config, &self.params)?;
        if let Some(opt) = &self.optimizer {
            if !opt.matches(self.params.tensors()) {
                return Err(Error::Format("optimizer state does not match parameters".into()));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from(KIND));
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        meta.insert("step".into(), Value::from(self.step));
        let mut opt_meta = Value::Null;
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(opt) = &self.optimizer {
            let mut o = Map::new();
            o.insert("step".into(), Value::from(opt.step));
            opt_meta = Value::Object(o);
            for (name, m) in self.params.names().iter().zip(&opt.m) {
                tensors.push((format!("{OPT_M}{name}"), m.clone()));
            }
            for (name, v) in self.params.names().iter().zip(&opt.v) {
                tensors.push((format!("{OPT_V}{name}"), v.clone()));
            }
        }
        meta.insert("optimizer".into(), opt_meta);
        Ok(Container { meta, tensors })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta.get("kind").and_then(Value::as_str) != Some(KIND) {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no config".into()))?,
        )?;
        let step = c
            .meta
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("checkpoint has no step".into()))?;
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in c.tensors {
            if name.starts_with(OPT_M) {
                m.push(t);
            } else if name.starts_with(OPT_V) {
                v.push(t);
            } else {
                params.push(name, t);
            }
        }
        let optimizer = match c.meta.get("optimizer") {
            Some(Value::Object(o)) => Some(OptimState {
                step: o
                    .get("step")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::Format("optimizer has no step".into()))?,
                m,
                v,
            }),
            _ => None,
        };
        let ckpt = Self {
            config,
            params,
            optimizer,
            step,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

/// Strips gate projections and optimizer state, leaving a plain transformer.
pub fn export_standard(ckpt: &Checkpoint) -> Result<Checkpoint> {
    ckpt.validate()?;
    let mut params = ckpt.params.clone();
    params.retain(|n| !is_gate_param(n));
    let config = ModelConfig {
        ablation_mode: AblationMode::None,
        ..ckpt.config.clone()
    };
    let out = Checkpoint {
        config,
        params,
        optimizer: None,
        step: ckpt.step,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_parameters, TokenBatch};

    fn gated() -> Checkpoint {
        let mut c = ModelConfig::desk(AblationMode::Local, 2);
        c.vocab_size = 20;
        c.d_model = 16;
        c.d_mlp = 32;
        c.max_pos = 8;
        let m = Model::<f32>::new(c).unwrap();
        let opt = OptimState::new(m.params().tensors());
        Checkpoint::from_model(&m, Some(opt), 7)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = gated();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn export_drops_gates_and_is_idempotent() {
        let ck = gated();
        let ex = export_standard(&ck).unwrap();
        assert_eq!(ex.config.ablation_mode, AblationMode::None);
        assert_eq!(ex.params.numel(), count_parameters(&ex.config).base);
        assert_eq!(ex.params.numel(), count_parameters(&ck.config).base);
        assert_eq!(export_standard(&ex).unwrap(), ex);

        let tokens = TokenBatch::new(vec![1, 5, 19, 3, 0, 2], 2, 3).unwrap();
        let a = ck.model().unwrap().forward_inference(&tokens).unwrap();
        let b = ex.model().unwrap().forward_inference(&tokens).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn malformed_checkpoint_is_rejected() {
        let mut ck = gated();
        ck.params.tensors_mut()[0] = Tensor::zeros([3, 3]);
        assert!(matches!(export_standard(&ck), Err(Error::Format(_))));
        let mut c = gated().to_container().unwrap();
        c.meta.insert("kind".into(), Value::from("activations"));
        assert!(Checkpoint::from_container(c).is_err());
    }
}
