//! Named parameter storage and the canonical parameter layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (n, t) in self.names.drain(..).zip(self.tensors.drain(..)) {
            if keep(&n) {
                names.push(n);
                tensors.push(t);
            }
        }
        self.names = names;
        self.tensors = tensors;
    }
}

/// Prefix shared by every gate-projection parameter.
pub const GATE_PREFIX: &str = "gate.";

pub fn is_gate_param(name: &str) -> bool {
    name.starts_with(GATE_PREFIX)
}

/// Indices of one block's parameters inside a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

/// Gate projection indices for one block: heads then MLP neurons.
#[derive(Clone, Copy, Debug)]
pub struct GateLayout {
    pub attn_w: usize,
    pub attn_b: usize,
    pub mlp_w: usize,
    pub mlp_b: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub gates: Vec<GateLayout>,
}

fn specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, m) = (c.d_model, c.d_mlp);
    let mut out = vec![
        ("wte".to_string(), vec![c.vocab_size, d], Init::Normal),
        ("wpe".to_string(), vec![c.max_pos, d], Init::Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        out.extend([
            (p("ln_1.g"), vec![d], Init::Ones),
            (p("ln_1.b"), vec![d], Init::Zeros),
            (p("attn.q"), vec![d, d], Init::Normal),
            (p("attn.k"), vec![d, d], Init::Normal),
            (p("attn.v"), vec![d, d], Init::Normal),
            (p("attn.o.w"), vec![d, d], Init::Normal),
            (p("attn.o.b"), vec![d], Init::Zeros),
            (p("ln_2.g"), vec![d], Init::Ones),
            (p("ln_2.b"), vec![d], Init::Zeros),
            (p("mlp.fc.w"), vec![d, m], Init::Normal),
            (p("mlp.fc.b"), vec![m], Init::Zeros),
            (p("mlp.proj.w"), vec![m, d], Init::Normal),
            (p("mlp.proj.b"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("ln_f.g".into(), vec![d], Init::Ones));
    out.push(("ln_f.b".into(), vec![d], Init::Zeros));
    if c.ablation_mode.has_gates() {
        for l in 0..c.n_layers {
            let p = |s: &str| format!("{GATE_PREFIX}{l}.{s}");
            out.extend([
                (p("attn.w"), vec![d, c.n_heads], Init::Normal),
                (p("attn.b"), vec![c.n_heads], Init::Zeros),
                (p("mlp.w"), vec![d, m], Init::Normal),
                (p("mlp.b"), vec![m], Init::Zeros),
            ]);
        }
    }
    out
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let per_block = 13;
        let blocks = (0..c.n_layers)
            .map(|l| {
                let b = 2 + l * per_block;
                BlockLayout {
                    ln1_g: b,
                    ln1_b: b + 1,
                    q: b + 2,
                    k: b + 3,
                    v: b + 4,
                    o_w: b + 5,
                    o_b: b + 6,
                    ln2_g: b + 7,
                    ln2_b: b + 8,
                    fc_w: b + 9,
                    fc_b: b + 10,
                    proj_w: b + 11,
                    proj_b: b + 12,
                }
            })
            .collect();
        let lnf_g = 2 + c.n_layers * per_block;
        let gates = if c.ablation_mode.has_gates() {
            (0..c.n_layers)
                .map(|l| {
                    let b = lnf_g + 2 + 4 * l;
                    GateLayout {
                        attn_w: b,
                        attn_b: b + 1,
                        mlp_w: b + 2,
                        mlp_b: b + 3,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            wte: 0,
            wpe: 1,
            blocks,
            lnf_g,
            lnf_b: lnf_g + 1,
            gates,
        }
    }
}

/// Seeded initialization: N(0, 0.02) matrices, zero biases, unit gains.
pub fn init_params<F: Float>(c: &ModelConfig) -> ParamSet<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut set = ParamSet::new();
    for (name, shape, init) in specs(c) {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Normal => (0..n).map(|_| F::of(normal.sample(&mut rng))).collect(),
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
        };
        set.push(name, Tensor::new(shape, data).expect("declared shape"));
    }
    set
}

/// Checks that `params` holds exactly the tensors `c` calls for, in order.
pub fn validate_params<F: Float>(c: &ModelConfig, params: &ParamSet<F>) -> Result<()> {
    let want = specs(c);
    if want.len() != params.len() {
        return Err(Error::Format(format!(
            "expected {} parameter tensors, found {}",
            want.len(),
            params.len()
        )));
    }
    for ((name, shape, _), (got_name, t)) in want.iter().zip(params.iter()) {
        if name != got_name || shape.as_slice() != t.shape() {
            return Err(Error::Format(format!(
                "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Parameter counts split into the base transformer and the gate projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub base: usize,
    pub gate: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.base + self.gate
    }
}

/// Closed-form parameter count.
pub fn count_parameters(c: &ModelConfig) -> ParamCount {
    let (v, d, m, l, p) = (c.vocab_size, c.d_model, c.d_mlp, c.n_layers, c.max_pos);
    let per_block = 4 * d // two layer norms
        + 4 * d * d + d // q, k, v, out + out bias
        + d * m + m // fc
        + m * d + d; // proj
    let base = v * d + p * d + l * per_block + 2 * d;
    let gate = if c.ablation_mode.has_gates() {
        l * (d + 1) * (c.n_heads + m)
    } else {
        0
    };
    ParamCount { base, gate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::AblationMode;

    #[test]
    fn closed_form_matches_enumeration() {
        for mode in [AblationMode::None, AblationMode::Local, AblationMode::Global] {
            let c = ModelConfig::desk(mode, 2);
            let params = init_params::<f32>(&c);
            let count = count_parameters(&c);
            assert_eq!(count.total(), params.numel());
            let base: usize = params
                .iter()
                .filter(|(n, _)| !is_gate_param(n))
                .map(|(_, t)| t.numel())
                .sum();
            assert_eq!(count.base, base);
        }
    }

    #[test]
    fn gate_count_formula() {
        let c = ModelConfig::desk(AblationMode::Local, 2);
        assert_eq!(
            count_parameters(&c).gate,
            c.n_layers * (c.d_model + 1) * (c.n_heads + c.d_mlp)
        );
        let c = ModelConfig::desk(AblationMode::None, 2);
        assert_eq!(count_parameters(&c).gate, 0);
    }

    #[test]
    fn layout_indices_name_the_right_tensors() {
        let c = ModelConfig::desk(AblationMode::Global, 1);
        let params = init_params::<f32>(&c);
        let layout = Layout::new(&c);
        assert_eq!(params.names()[layout.blocks[1].proj_b], "h.1.mlp.proj.b");
        assert_eq!(params.names()[layout.lnf_b], "ln_f.b");
        assert_eq!(params.names()[layout.gates[1].mlp_b], "gate.1.mlp.b");
        assert!(validate_params(&c, &params).is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::desk(AblationMode::Local, 1);
        assert_eq!(init_params::<f32>(&c), init_params::<f32>(&c));
        let mut c2 = c.clone();
        c2.seed = 1;
        assert_ne!(init_params::<f32>(&c), init_params::<f32>(&c2));
    }
}
