//! Recorded activations at one hook site.

use std::path::Path;

use serde_json::{Map, Value};

use crate::container::{sha256_hex, Container};
use crate::data::tokenizer::encode;
use crate::error::{Error, Result};
use crate::model::{Hook, Model, Site, TokenBatch};
use crate::tensor::{Float, Tensor};

const KIND: &str = "activations";
const TENSOR: &str = "activations";

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    pub site: Site,
    /// `[n_tokens, d_site]`, rows in token order.
    pub activations: Tensor<f32>,
    pub checkpoint_hash: String,
    pub data_hash: String,
}

impl ActivationRecord {
    pub fn n_tokens(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.activations.shape()[1]
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from(KIND));
        meta.insert("layer".into(), Value::from(self.layer));
        meta.insert("site".into(), Value::from(self.site.to_string()));
        meta.insert(
            "checkpoint_hash".into(),
            Value::from(self.checkpoint_hash.clone()),
        );
        meta.insert("data_hash".into(), Value::from(self.data_hash.clone()));
        Container {
            meta,
            tensors: vec![(TENSOR.into(), self.activations.clone())],
        }
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let text = |key: &str| -> Result<String> {
            c.meta
                .get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("activation record has no `{key}`")))
        };
        if text("kind")? != KIND {
            return Err(Error::Format("container is not an activation record".into()));
        }
        let site: Site = text("site")?.parse()?;
        let (checkpoint_hash, data_hash) = (text("checkpoint_hash")?, text("data_hash")?);
        let layer = c
            .meta
            .get("layer")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("activation record has no `layer`".into()))?
            as usize;
        let activations = match c.tensors.pop() {
            Some((name, t)) if name == TENSOR && t.rank() == 2 && c.tensors.is_empty() => t,
            _ => return Err(Error::Format("activation record must hold one 2-D tensor".into())),
        };
        Ok(Self {
            layer,
            site,
            activations,
            checkpoint_hash,
            data_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// SHA-256 of the serialized record.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_container().to_bytes()?))
    }
}

struct Capture<F: Float> {
    layer: usize,
    site: Site,
    rows: Vec<F>,
}

impl<F: Float> Hook<F> for Capture<F> {
    fn visit(&mut self, layer: usize, site: Site, value: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        if layer == self.layer && site == self.site {
            self.rows.extend_from_slice(value.data());
        }
        Ok(None)
    }
}

/// SHA-256 over the documents, each length-prefixed.
pub fn docs_hash(docs: &[String]) -> String {
    let mut bytes = Vec::new();
    for d in docs {
        bytes.extend_from_slice(&(d.len() as u64).to_le_bytes());
        bytes.extend_from_slice(d.as_bytes());
    }
    sha256_hex(&bytes)
}

/// Runs the clean path over every document and keeps the activations at
/// `(layer, site)`, one row per token.
///
/// Documents are processed independently in windows of up to `seq_len`
/// tokens; consecutive windows of equal length share a batch of at most
/// `batch_size`.
pub fn record_activations<F: Float>(
    model: &Model<F>,
    checkpoint_hash: &str,
    docs: &[String],
    layer: usize,
    site: Site,
    seq_len: usize,
    batch_size: usize,
) -> Result<ActivationRecord> {
    let c = model.config();
    if layer >= c.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for a {}-layer model",
            c.n_layers
        )));
    }
    if seq_len == 0 || seq_len > c.max_pos || batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "seq_len must be in 1..={} and batch_size positive",
            c.max_pos
        )));
    }
    let mut hook = Capture {
        layer,
        site,
        rows: Vec::new(),
    };
    let mut pending: Vec<u32> = Vec::new();
    let mut pending_len = 0;
    let mut pending_rows = 0;
    let flush = |ids: &mut Vec<u32>, len: usize, rows: &mut usize, hook: &mut Capture<F>| -> Result<()> {
        if *rows > 0 {
            model.forward_with_hook(&TokenBatch::new(std::mem::take(ids), *rows, len)?, hook)?;
            *rows = 0;
        }
        Ok(())
    };
    for doc in docs {
        for window in encode(doc).chunks(seq_len) {
            if window.len() != pending_len || pending_rows == batch_size {
                flush(&mut pending, pending_len, &mut pending_rows, &mut hook)?;
                pending_len = window.len();
            }
            pending.extend_from_slice(window);
            pending_rows += 1;
        }
    }
    flush(&mut pending, pending_len, &mut pending_rows, &mut hook)?;

    let d = c.d_model;
    let n = hook.rows.len() / d;
    let data = hook.rows.iter().map(|v| v.as_f64() as f32).collect();
    Ok(ActivationRecord {
        layer,
        site,
        activations: Tensor::new([n, d], data)?,
        checkpoint_hash: checkpoint_hash.to_string(),
        data_hash: docs_hash(docs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationMode, ModelConfig};

    fn model() -> Model<f32> {
        let mut c = ModelConfig::desk(AblationMode::None, 1);
        c.d_model = 16;
        c.d_mlp = 32;
        c.max_pos = 16;
        Model::new(c).unwrap()
    }

    #[test]
    fn one_row_per_token_and_deterministic() {
        let m = model();
        let docs: Vec<String> = (0..10).map(|i| "ab".repeat(i * 3 + 1)).collect();
        let total: usize = docs.iter().map(String::len).sum();
        let r = record_activations(&m, "h", &docs, 1, Site::MlpOut, 16, 3).unwrap();
        assert_eq!(r.n_tokens(), total);
        assert_eq!(r.dim(), 16);
        let again = record_activations(&m, "h", &docs, 1, Site::MlpOut, 16, 5).unwrap();
        assert!(r.activations.max_abs_diff(&again.activations) < 1e-6);
        assert_eq!(
            r.hash().unwrap(),
            record_activations(&m, "h", &docs, 1, Site::MlpOut, 16, 3)
                .unwrap()
                .hash()
                .unwrap()
        );
        assert!(record_activations(&m, "h", &docs, 2, Site::MlpOut, 16, 3).is_err());
    }

    #[test]
    fn rows_match_a_single_document_run() {
        let m = model();
        let docs = vec!["hello there".to_string()];
        let r = record_activations(&m, "h", &docs, 0, Site::Resid, 16, 4).unwrap();
        let mut hook = Capture {
            layer: 0,
            site: Site::Resid,
            rows: Vec::new(),
        };
        m.forward_with_hook(&TokenBatch::single(&encode(&docs[0])).unwrap(), &mut hook)
            .unwrap();
        assert_eq!(r.activations.data(), hook.rows.as_slice());
    }

    #[test]
    fn container_round_trip() {
        let m = model();
        let r = record_activations(&m, "abc", &["xyz".to_string()], 0, Site::AttnOut, 8, 2).unwrap();
        let back = ActivationRecord::from_container(r.to_container()).unwrap();
        assert_eq!(back, r);
    }
}
