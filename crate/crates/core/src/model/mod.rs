//! GPT-Neo-style decoder with dual clean/ablated residual streams.
//!
//! The clean stream is an ordinary transformer forward. The ablated stream
//! runs the same weights but multiplies each attention head's output and each
//! MLP hidden unit by a kWTA gate mask. Training sums the cross-entropy of
//! both streams; inference runs the clean stream only and never touches the
//! gate projections.

pub mod checkpoint;
pub mod config;
pub mod params;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{export_standard, Checkpoint};
pub use config::{AblationMode, ModelConfig};
pub use params::{count_parameters, is_gate_param, Layout, ParamCount, ParamSet};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Row-major `[batch, seq]` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || seq == 0 {
            return Err(Error::shape(
                "token_batch",
                format!("{} ids for [{batch}, {seq}]", ids.len()),
            ));
        }
        Ok(Self { ids, batch, seq })
    }

    pub fn single(ids: &[u32]) -> Result<Self> {
        Self::new(ids.to_vec(), 1, ids.len())
    }
}

/// Activation sites exposed to hooks and recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Attention block output (after the output projection).
    AttnOut,
    /// MLP block output (after the down projection).
    MlpOut,
    /// Residual stream leaving the block.
    Resid,
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Site::AttnOut => "attn_out",
            Site::MlpOut => "mlp_out",
            Site::Resid => "resid",
        })
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_out" => Ok(Site::AttnOut),
            "mlp_out" => Ok(Site::MlpOut),
            "resid" => Ok(Site::Resid),
            other => Err(Error::InvalidArgument(format!(
                "unknown site `{other}` (expected attn_out, mlp_out or resid)"
            ))),
        }
    }
}

/// Observes (and optionally replaces) clean-stream activations.
pub trait Hook<F: Float> {
    /// Return `Some` to substitute the activation at `(layer, site)`.
    fn visit(&mut self, layer: usize, site: Site, value: &Tensor<F>) -> Result<Option<Tensor<F>>>;
}

/// No-op hook.
pub struct NoHook;

impl<F: Float> Hook<F> for NoHook {
    fn visit(&mut self, _: usize, _: Site, _: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        Ok(None)
    }
}

/// Which units a gate acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSite {
    Heads,
    Neurons,
}

/// One applied gate mask, recorded for instrumentation.
#[derive(Clone, Debug)]
pub struct GateRecord<F: Float> {
    pub layer: usize,
    pub site: GateSite,
    /// Binary mask `[batch, seq, n_units]`.
    pub mask: Rc<Tensor<F>>,
}

/// Result of [`Model::forward_dual`].
pub struct DualOutput<'t, F: Float> {
    pub clean_logits: Var<'t, F>,
    pub ablated_logits: Var<'t, F>,
    pub masks: Vec<GateRecord<F>>,
    /// Passes of a residual stream through the block stack.
    pub traversals: usize,
}

/// Clean and ablated residual streams at a block boundary.
#[derive(Clone, Copy, Debug)]
pub struct DualResidualState<'t, F: Float> {
    pub clean: Var<'t, F>,
    pub ablated: Var<'t, F>,
}

struct BlockMasks<'t, F: Float> {
    heads: Var<'t, F>,
    neurons: Var<'t, F>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Float = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<F>,
}

impl<F: Float> Model<F> {
    /// Freshly initialized model, seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = params::init_params(&config);
        Ok(Self {
            layout: Layout::new(&config),
            config,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        params::validate_params(&config, &params)?;
        Ok(Self {
            layout: Layout::new(&config),
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Puts every parameter on `tape`: as gradient leaves on a recording tape,
    /// as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Vec<Var<'t, F>> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect()
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_pos {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_pos {}",
                tokens.seq, self.config.max_pos
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed<'t>(&self, p: &[Var<'t, F>], tokens: &TokenBatch) -> Result<Var<'t, F>> {
        let (b, t) = (tokens.batch, tokens.seq);
        let tok = p[self.layout.wte].embedding(&tokens.ids, &[b, t])?;
        let positions: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let pos = p[self.layout.wpe].embedding(&positions, &[b, t])?;
        tok.add(pos)
    }

    fn attention<'t>(
        &self,
        p: &[Var<'t, F>],
        layer: usize,
        x: Var<'t, F>,
        head_mask: Option<Var<'t, F>>,
    ) -> Result<Var<'t, F>> {
        let l = &self.layout.blocks[layer];
        let c = &self.config;
        let [b, t, d] = x.shape()[..] else {
            return Err(Error::shape("attention", "expected [batch, seq, d_model]"));
        };
        let (h, dh) = (c.n_heads, c.d_head());
        let xn = x.layer_norm(p[l.ln1_g], p[l.ln1_b], LN_EPS)?;
        let split = |w: usize| -> Result<Var<'t, F>> {
            xn.matmul(p[w])?.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let (q, k, v) = (split(l.q)?, split(l.k)?, split(l.v)?);
        let att = q.matmul_t(k)?.scale(1.0 / (dh as f64).sqrt())?.causal_softmax()?;
        let mut z = att.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        if let Some(mask) = head_mask {
            z = z.mul_groups(mask, dh)?;
        }
        z.matmul(p[l.o_w])?.add_bias(p[l.o_b])
    }

    fn mlp<'t>(
        &self,
        p: &[Var<'t, F>],
        layer: usize,
        x: Var<'t, F>,
        neuron_mask: Option<Var<'t, F>>,
    ) -> Result<Var<'t, F>> {
        let l = &self.layout.blocks[layer];
        let mut hidden = x
            .layer_norm(p[l.ln2_g], p[l.ln2_b], LN_EPS)?
            .matmul(p[l.fc_w])?
            .add_bias(p[l.fc_b])?
            .gelu()?;
        if let Some(mask) = neuron_mask {
            hidden = hidden.mul(mask)?;
        }
        hidden.matmul(p[l.proj_w])?.add_bias(p[l.proj_b])
    }

    fn hooked<'t>(
        tape: &'t Tape<F>,
        hook: &mut dyn Hook<F>,
        layer: usize,
        site: Site,
        v: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        Ok(match hook.visit(layer, site, &v.value())? {
            Some(replacement) => {
                if replacement.shape() != v.value().shape() {
                    return Err(Error::shape(
                        "hook",
                        format!("replacement {:?} for {site} has wrong shape", replacement.shape()),
                    ));
                }
                tape.constant(replacement)
            }
            None => v,
        })
    }

    fn block<'t>(
        &self,
        tape: &'t Tape<F>,
        p: &[Var<'t, F>],
        layer: usize,
        x: Var<'t, F>,
        masks: Option<&BlockMasks<'t, F>>,
        hook: &mut dyn Hook<F>,
    ) -> Result<Var<'t, F>> {
        let attn = self.attention(p, layer, x, masks.map(|m| m.heads))?;
        let attn = Self::hooked(tape, hook, layer, Site::AttnOut, attn)?;
        let x = x.add(attn)?;
        let mlp = self.mlp(p, layer, x, masks.map(|m| m.neurons))?;
        let mlp = Self::hooked(tape, hook, layer, Site::MlpOut, mlp)?;
        let x = x.add(mlp)?;
        Self::hooked(tape, hook, layer, Site::Resid, x)
    }

    fn final_hidden<'t>(&self, p: &[Var<'t, F>], x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.layer_norm(p[self.layout.lnf_g], p[self.layout.lnf_b], LN_EPS)
    }

    fn unembed<'t>(&self, p: &[Var<'t, F>], h: Var<'t, F>) -> Result<Var<'t, F>> {
        // tied with the token embedding
        h.matmul_t(p[self.layout.wte])
    }

    fn gate_masks<'t>(
        &self,
        p: &[Var<'t, F>],
        layer: usize,
        context: Var<'t, F>,
        records: &mut Vec<GateRecord<F>>,
    ) -> Result<BlockMasks<'t, F>> {
        let g = &self.layout.gates[layer];
        let heads = context
            .matmul(p[g.attn_w])?
            .add_bias(p[g.attn_b])?
            .ste_gate(self.config.k_attn)?;
        let neurons = context
            .matmul(p[g.mlp_w])?
            .add_bias(p[g.mlp_b])?
            .ste_gate(self.config.k_mlp)?;
        records.push(GateRecord {
            layer,
            site: GateSite::Heads,
            mask: heads.value(),
        });
        records.push(GateRecord {
            layer,
            site: GateSite::Neurons,
            mask: neurons.value(),
        });
        Ok(BlockMasks { heads, neurons })
    }

    /// Clean-stream logits with hooks at every site.
    pub fn forward_hooked<'t>(
        &self,
        tape: &'t Tape<F>,
        p: &[Var<'t, F>],
        tokens: &TokenBatch,
        hook: &mut dyn Hook<F>,
    ) -> Result<Var<'t, F>> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(p, tokens)?;
        for layer in 0..self.config.n_layers {
            x = self.block(tape, p, layer, x, None, hook)?;
        }
        let h = self.final_hidden(p, x)?;
        self.unembed(p, h)
    }

    /// Both streams in one call. `p` must come from [`Model::bind`] on `tape`.
    pub fn forward_dual<'t>(
        &self,
        tape: &'t Tape<F>,
        p: &[Var<'t, F>],
        tokens: &TokenBatch,
    ) -> Result<DualOutput<'t, F>> {
        self.check_tokens(tokens)?;
        let mut masks = Vec::new();
        let embedded = self.embed(p, tokens)?;
        let n_layers = self.config.n_layers;
        match self.config.ablation_mode {
            AblationMode::None => {
                let mut x = embedded;
                for layer in 0..n_layers {
                    x = self.block(tape, p, layer, x, None, &mut NoHook)?;
                }
                let logits = self.unembed(p, self.final_hidden(p, x)?)?;
                Ok(DualOutput {
                    clean_logits: logits,
                    ablated_logits: logits,
                    masks,
                    traversals: 1,
                })
            }
            AblationMode::Local => {
                let mut state = DualResidualState {
                    clean: embedded,
                    ablated: embedded,
                };
                for layer in 0..n_layers {
                    let gate = self.gate_masks(p, layer, state.ablated, &mut masks)?;
                    state = DualResidualState {
                        clean: self.block(tape, p, layer, state.clean, None, &mut NoHook)?,
                        ablated: self.block(tape, p, layer, state.ablated, Some(&gate), &mut NoHook)?,
                    };
                }
                Ok(DualOutput {
                    clean_logits: self.unembed(p, self.final_hidden(p, state.clean)?)?,
                    ablated_logits: self.unembed(p, self.final_hidden(p, state.ablated)?)?,
                    masks,
                    traversals: 2,
                })
            }
            AblationMode::Global => {
                let mut clean = embedded;
                for layer in 0..n_layers {
                    clean = self.block(tape, p, layer, clean, None, &mut NoHook)?;
                }
                let context = self.final_hidden(p, clean)?;
                let clean_logits = self.unembed(p, context)?;
                let gates = (0..n_layers)
                    .map(|layer| self.gate_masks(p, layer, context, &mut masks))
                    .collect::<Result<Vec<_>>>()?;
                let mut ablated = embedded;
                for (layer, gate) in gates.iter().enumerate() {
                    ablated = self.block(tape, p, layer, ablated, Some(gate), &mut NoHook)?;
                }
                Ok(DualOutput {
                    clean_logits,
                    ablated_logits: self.unembed(p, self.final_hidden(p, ablated)?)?,
                    masks,
                    traversals: 2,
                })
            }
        }
    }

    /// Single clean pass without gates; `[batch, seq, vocab]` logits.
    pub fn forward_inference(&self, tokens: &TokenBatch) -> Result<Tensor<F>> {
        self.forward_with_hook(tokens, &mut NoHook)
    }

    pub fn forward_with_hook(&self, tokens: &TokenBatch, hook: &mut dyn Hook<F>) -> Result<Tensor<F>> {
        let tape = Tape::inference();
        let p = self.bind(&tape);
        let logits = self.forward_hooked(&tape, &p, tokens, hook)?;
        let out = (*logits.value()).clone();
        Ok(out)
    }

    /// Greedy continuation of `prompt` by `steps` tokens.
    pub fn greedy_decode(&self, prompt: &[u32], steps: usize) -> Result<Vec<u32>> {
        let mut ids = prompt.to_vec();
        for _ in 0..steps {
            let start = ids.len().saturating_sub(self.config.max_pos);
            let window = TokenBatch::single(&ids[start..])?;
            let logits = self.forward_inference(&window)?;
            let v = self.config.vocab_size;
            let last = &logits.data()[logits.numel() - v..];
            let next = last
                .iter()
                .enumerate()
                .fold(
                    (0, F::neg_infinity()),
                    |best, (i, &x)| if x > best.1 { (i, x) } else { best },
                )
                .0;
            ids.push(next as u32);
        }
        Ok(ids[prompt.len()..].to_vec())
    }
}
