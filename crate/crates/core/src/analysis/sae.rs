//! Sparse autoencoders over recorded activations.
//!
//! Inputs are rescaled by one dataset-wide constant so their mean L2 norm is
//! `sqrt(d)`. The encoder is `relu(x W_enc + b_enc)` with no decoder-bias
//! subtraction; the decoder is affine with unit-norm dictionary rows. The loss
//! is the per-token squared reconstruction error plus `lambda(t) * |z|_1`,
//! with `lambda` ramped linearly from zero over the warm-up.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::record::ActivationRecord;
use crate::container::Container;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Hook, Model, Site};
use crate::tape::Tape;
use crate::tensor::{Float, Tensor};
use crate::train::mean_cross_entropy;
use crate::train::optim::{adamw_step, AdamWConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    pub expansion: usize,
    pub l1_coeff: f64,
    pub l1_warmup_steps: u64,
    pub lr: f64,
    /// The learning rate decays linearly to zero over this many final steps.
    pub lr_decay_steps: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SaeConfig {
    /// The reference schedule: 100k steps of 4096 tokens.
    pub fn reference() -> Self {
        Self {
            expansion: 16,
            l1_coeff: 5.0,
            l1_warmup_steps: 5_000,
            lr: 1e-5,
            lr_decay_steps: 20_000,
            batch_size: 4096,
            steps: 100_000,
            seed: 42,
        }
    }

    /// Scaled-down schedule (about 12M token samples) for desk-sized records.
    /// Warm-up and decay keep the reference proportions of the run length; the
    /// learning rate is raised so the shorter run still converges.
    pub fn desk() -> Self {
        Self {
            expansion: 16,
            l1_coeff: 5.0,
            l1_warmup_steps: 150,
            lr: 3e-3,
            lr_decay_steps: 600,
            batch_size: 4096,
            steps: 3000,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("sae config: {m}")));
        if self.expansion == 0 || self.batch_size == 0 || self.steps == 0 {
            return bad("expansion, batch_size and steps must be positive");
        }
        if !(self.lr > 0.0) || !(self.l1_coeff >= 0.0) {
            return bad("lr must be positive and l1_coeff non-negative");
        }
        Ok(())
    }

    /// L1 coefficient at `step`: linear from 0 to `l1_coeff` over the warm-up.
    pub fn l1_at(&self, step: u64) -> f64 {
        if self.l1_warmup_steps == 0 || step >= self.l1_warmup_steps {
            self.l1_coeff
        } else {
            self.l1_coeff * step as f64 / self.l1_warmup_steps as f64
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let decay_start = self.steps.saturating_sub(self.lr_decay_steps);
        if self.lr_decay_steps == 0 || step < decay_start {
            self.lr
        } else {
            self.lr * (self.steps - step.min(self.steps)) as f64 / self.lr_decay_steps as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sae {
    pub layer: usize,
    pub site: Site,
    /// Multiplier applied to inputs before encoding.
    pub input_scale: f32,
    pub w_enc: Tensor<f32>,
    pub b_enc: Tensor<f32>,
    pub w_dec: Tensor<f32>,
    pub b_dec: Tensor<f32>,
}

/// Per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaeStep {
    pub step: u64,
    pub lr: f64,
    pub l1_coeff: f64,
    /// Mean per-token squared error in normalized units.
    pub mse: f64,
    pub l1: f64,
    pub l0: f64,
}

/// `sqrt(d) / mean ||x||`, or 1 when every row is zero.
pub fn normalization_scale(x: &Tensor<f32>) -> f32 {
    let d = x.last_dim();
    let rows = x.numel() / d.max(1);
    let mean_norm = x
        .rows()
        .map(|r| r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows.max(1) as f64;
    if mean_norm > 0.0 {
        ((d as f64).sqrt() / mean_norm) as f32
    } else {
        1.0
    }
}

fn normalize_rows(w: &mut Tensor<f32>) {
    for row in w.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn transpose(w: &Tensor<f32>) -> Tensor<f32> {
    kernels::permute(w, &[1, 0]).expect("rank-2 tensor")
}

impl Sae {
    pub fn d_in(&self) -> usize {
        self.w_enc.shape()[0]
    }

    pub fn d_dict(&self) -> usize {
        self.w_enc.shape()[1]
    }

    /// Fresh SAE with unit-norm random dictionary rows and `W_enc = W_decᵀ`.
    pub fn init(layer: usize, site: Site, d_in: usize, d_dict: usize, input_scale: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_in as f32).sqrt();
        let u = Uniform::new(-bound, bound).expect("valid range");
        let mut w_dec = Tensor::new(
            [d_dict, d_in],
            (0..d_dict * d_in).map(|_| u.sample(&mut rng)).collect(),
        )
        .expect("shape");
        normalize_rows(&mut w_dec);
        Self {
            layer,
            site,
            input_scale,
            w_enc: transpose(&w_dec),
            b_enc: Tensor::zeros([d_dict]),
            w_dec,
            b_dec: Tensor::zeros([d_in]),
        }
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if x.last_dim() != self.d_in() {
            return Err(Error::shape(
                "sae",
                format!("input width {} vs SAE width {}", x.last_dim(), self.d_in()),
            ));
        }
        Ok(())
    }

    /// Latent codes for raw (unnormalized) rows `[.., d_in]`.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let rows = x.numel() / self.d_in();
        let xs = x.map(|v| v * self.input_scale).reshape([rows, self.d_in()])?;
        let mut z = kernels::matmul(&xs, &self.w_enc, false, false)?;
        for row in z.rows_mut() {
            for (v, &b) in row.iter_mut().zip(self.b_enc.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        Ok(z)
    }

    /// Reconstruction of raw rows, in the original scale and shape.
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let z = self.encode(x)?;
        let mut r = kernels::matmul(&z, &self.w_dec, false, false)?;
        let inv = 1.0 / self.input_scale;
        for row in r.rows_mut() {
            for (v, &b) in row.iter_mut().zip(self.b_dec.data()) {
                *v = (*v + b) * inv;
            }
        }
        r.reshape(x.shape().to_vec())
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from("sae"));
        meta.insert("layer".into(), Value::from(self.layer));
        meta.insert("site".into(), Value::from(self.site.to_string()));
        meta.insert("input_scale".into(), Value::from(f64::from(self.input_scale)));
        Container {
            meta,
            tensors: vec![
                ("w_enc".into(), self.w_enc.clone()),
                ("b_enc".into(), self.b_enc.clone()),
                ("w_dec".into(), self.w_dec.clone()),
                ("b_dec".into(), self.b_dec.clone()),
            ],
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("sae: {m}"));
        if c.meta.get("kind").and_then(Value::as_str) != Some("sae") {
            return Err(bad("container is not an SAE"));
        }
        let layer = c
            .meta
            .get("layer")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing layer"))? as usize;
        let site: Site = c
            .meta
            .get("site")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing site"))?
            .parse()?;
        let input_scale = c
            .meta
            .get("input_scale")
            .and_then(Value::as_f64)
            .ok_or_else(|| bad("missing input_scale"))? as f32;
        let get = |name: &str| -> Result<Tensor<f32>> {
            c.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| bad(&format!("missing tensor {name}")))
        };
        let sae = Self {
            layer,
            site,
            input_scale,
            w_enc: get("w_enc")?,
            b_enc: get("b_enc")?,
            w_dec: get("w_dec")?,
            b_dec: get("b_dec")?,
        };
        let (d, m) = (sae.w_enc.shape().first().copied().unwrap_or(0), sae.b_enc.numel());
        if sae.w_enc.shape() != [d, m] || sae.w_dec.shape() != [m, d] || sae.b_dec.shape() != [d] {
            return Err(bad("inconsistent tensor shapes"));
        }
        Ok(sae)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Trains an SAE on `record`. Returns the model and one log entry per step.
pub fn sae_train(record: &ActivationRecord, cfg: &SaeConfig) -> Result<(Sae, Vec<SaeStep>)> {
    cfg.validate()?;
    let x = &record.activations;
    let (n, d) = (record.n_tokens(), record.dim());
    if n == 0 {
        return Err(Error::InvalidArgument("activation record is empty".into()));
    }
    let scale = normalization_scale(x);
    let mut sae = Sae::init(record.layer, record.site, d, d * cfg.expansion, scale, cfg.seed);
    let mut params = vec![
        sae.w_enc.clone(),
        sae.b_enc.clone(),
        sae.w_dec.clone(),
        sae.b_dec.clone(),
    ];
    let mut state = OptimState::new(&params);
    let adam = AdamWConfig {
        grad_clip: None,
        ..AdamWConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.steps as usize);
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(b * d);
        for _ in 0..b {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let r = order[cursor];
            cursor += 1;
            batch.extend(x.data()[r * d..(r + 1) * d].iter().map(|v| v * scale));
        }
        let lambda = cfg.l1_at(step);
        let lr = cfg.lr_at(step);

        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let xb = tape.constant(Tensor::new([b, d], batch)?);
        let z = xb.matmul(vars[0])?.add_bias(vars[1])?.relu()?;
        let recon = z.matmul(vars[2])?.add_bias(vars[3])?;
        let err = recon.sub(xb)?;
        let mse = err.mul(err)?.sum()?.scale(1.0 / b as f64)?;
        let l1 = z.sum()?.scale(1.0 / b as f64)?;
        let loss = if lambda == 0.0 {
            mse
        } else {
            mse.add(l1.scale(lambda)?)?
        };
        let mse_v = f64::from(mse.value().item()?);
        let l1_v = f64::from(l1.value().item()?);
        let l0 = z.value().data().iter().filter(|&&v| v > 0.0).count() as f64 / b as f64;
        if !(mse_v.is_finite() && l1_v.is_finite()) {
            return Err(Error::Diverged {
                step,
                message: "non-finite SAE loss".into(),
            });
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f32>> = vars
            .iter()
            .zip(&params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        drop(tape);
        adamw_step(&mut params, &mut g, &mut state, lr, &adam)?;
        normalize_rows(&mut params[2]);
        history.push(SaeStep {
            step,
            lr,
            l1_coeff: lambda,
            mse: mse_v,
            l1: l1_v,
            l0,
        });
    }
    let [w_enc, b_enc, w_dec, b_dec]: [Tensor<f32>; 4] = params.try_into().expect("four tensors");
    sae.w_enc = w_enc;
    sae.b_enc = b_enc;
    sae.w_dec = w_dec;
    sae.b_dec = b_dec;
    Ok((sae, history))
}

/// Mean number of active latents per row of `record`.
pub fn sae_l0(sae: &Sae, record: &ActivationRecord) -> Result<f64> {
    let d = record.dim();
    let n = record.n_tokens();
    if n == 0 {
        return Ok(0.0);
    }
    let mut active = 0usize;
    for chunk in record.activations.data().chunks(4096 * d) {
        let rows = chunk.len() / d;
        let z = sae.encode(&Tensor::new([rows, d], chunk.to_vec())?)?;
        active += z.data().iter().filter(|&&v| v > 0.0).count();
    }
    Ok(active as f64 / n as f64)
}

/// `clamp((h_zero - h_sae) / (h_zero - h_clean), 0, 1)`; 1 when the site is
/// irrelevant (`h_zero == h_clean`).
pub fn ce_score_from(h_clean: f64, h_sae: f64, h_zero: f64) -> f64 {
    let denom = h_zero - h_clean;
    if denom == 0.0 {
        return 1.0;
    }
    ((h_zero - h_sae) / denom).clamp(0.0, 1.0)
}

/// Cross-entropies behind a CE score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CeScore {
    pub h_clean: f64,
    pub h_sae: f64,
    pub h_zero: f64,
    pub score: f64,
}

enum Replace<'a> {
    Sae(&'a Sae),
    Zero,
}

struct SiteReplacement<'a> {
    layer: usize,
    site: Site,
    with: Replace<'a>,
}

impl<F: Float> Hook<F> for SiteReplacement<'_> {
    fn visit(&mut self, layer: usize, site: Site, value: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        if layer != self.layer || site != self.site {
            return Ok(None);
        }
        Ok(Some(match self.with {
            Replace::Zero => Tensor::zeros(value.shape().to_vec()),
            Replace::Sae(sae) => sae.reconstruct(&value.cast())?.cast(),
        }))
    }
}

/// Loss recovered when the SAE's reconstruction replaces its site, relative
/// to zero-ablating the site.
pub fn ce_score<F: Float>(model: &Model<F>, sae: &Sae, batches: &[Batch]) -> Result<CeScore> {
    if sae.layer >= model.config().n_layers || sae.d_in() != model.config().d_model {
        return Err(Error::InvalidArgument(
            "SAE site does not exist in this model".into(),
        ));
    }
    let h_clean = mean_cross_entropy(model, batches, &mut crate::model::NoHook)?;
    let mut with_sae = SiteReplacement {
        layer: sae.layer,
        site: sae.site,
        with: Replace::Sae(sae),
    };
    let h_sae = mean_cross_entropy(model, batches, &mut with_sae)?;
    let mut zeroed = SiteReplacement {
        layer: sae.layer,
        site: sae.site,
        with: Replace::Zero,
    };
    let h_zero = mean_cross_entropy(model, batches, &mut zeroed)?;
    Ok(CeScore {
        h_clean,
        h_sae,
        h_zero,
        score: ce_score_from(h_clean, h_sae, h_zero),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(rows: usize, d: usize, f: impl Fn(usize, usize) -> f32) -> ActivationRecord {
        let data = (0..rows * d).map(|i| f(i / d, i % d)).collect();
        ActivationRecord {
            layer: 0,
            site: Site::MlpOut,
            activations: Tensor::new([rows, d], data).unwrap(),
            checkpoint_hash: String::new(),
            data_hash: String::new(),
        }
    }

    #[test]
    fn ce_score_examples() {
        assert_eq!(ce_score_from(2.0, 2.5, 4.0), 0.75);
        assert_eq!(ce_score_from(2.0, 2.0, 4.0), 1.0);
        assert_eq!(ce_score_from(2.0, 4.0, 4.0), 0.0);
        assert_eq!(ce_score_from(2.0, 9.0, 4.0), 0.0);
        assert_eq!(ce_score_from(3.0, 3.5, 3.0), 1.0);
    }

    #[test]
    fn warmup_is_linear() {
        let c = SaeConfig {
            l1_coeff: 5.0,
            l1_warmup_steps: 100,
            ..SaeConfig::desk()
        };
        assert_eq!(c.l1_at(0), 0.0);
        assert_eq!(c.l1_at(50), 2.5);
        assert_eq!(c.l1_at(100), 5.0);
        assert_eq!(c.l1_at(1000), 5.0);
    }

    #[test]
    fn init_ties_encoder_to_decoder() {
        let s = Sae::init(0, Site::MlpOut, 4, 8, 1.0, 0);
        assert_eq!(s.w_enc, transpose(&s.w_dec));
        for row in s.w_dec.rows() {
            assert!((row.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_record_stays_zero() {
        let r = record(64, 4, |_, _| 0.0);
        let cfg = SaeConfig {
            steps: 20,
            batch_size: 16,
            expansion: 2,
            ..SaeConfig::desk()
        };
        let (sae, _) = sae_train(&r, &cfg).unwrap();
        assert_eq!(sae_l0(&sae, &r).unwrap(), 0.0);
        assert!(sae
            .reconstruct(&r.activations)
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn reconstruction_improves_without_l1() {
        let r = record(512, 8, |i, j| ((i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5);
        let cfg = SaeConfig {
            steps: 200,
            batch_size: 64,
            expansion: 2,
            l1_coeff: 0.0,
            lr: 1e-2,
            lr_decay_steps: 0,
            ..SaeConfig::desk()
        };
        let (sae, hist) = sae_train(&r, &cfg).unwrap();
        let head: f64 = hist[..20].iter().map(|h| h.mse).sum::<f64>() / 20.0;
        let tail: f64 = hist[180..].iter().map(|h| h.mse).sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        for row in sae.w_dec.rows() {
            assert!((row.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() < 1e-4);
        }
        assert!(sae_l0(&sae, &r).unwrap() <= sae.d_dict() as f64);
        let back = Sae::from_container(sae.to_container()).unwrap();
        assert_eq!(back, sae);
    }
}
