//! Component-level circuit discovery by edge patching.
//!
//! Nodes are the token embedding, every attention head, every MLP and the
//! unembedding. Each node reads the sum of the outputs of the nodes before
//! it in residual-stream order; an edge carries one such output. A pruned
//! edge feeds the destination the source's output from the corrupt prompt
//! instead. Everything runs in f64 so an all-retained graph reproduces the
//! model's own logits.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ioi::IoiPrompt;
use super::metrics::kl_divergence;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Model, TokenBatch, LN_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

impl NodeKind {
    pub fn name(self) -> String {
        match self {
            NodeKind::Embed => "embed".into(),
            NodeKind::Head { layer, head } => format!("a{layer}.h{head}"),
            NodeKind::Mlp { layer } => format!("m{layer}"),
            NodeKind::Output => "output".into(),
        }
    }
}

/// Nodes in topological order and the edges between them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentGraph {
    pub nodes: Vec<NodeKind>,
    /// `(src, dst)` node indices, grouped by destination.
    pub edges: Vec<(usize, usize)>,
    incoming: Vec<Vec<usize>>,
}

impl ComponentGraph {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        let mut nodes = vec![NodeKind::Embed];
        for layer in 0..n_layers {
            nodes.extend((0..n_heads).map(|head| NodeKind::Head { layer, head }));
            nodes.push(NodeKind::Mlp { layer });
        }
        nodes.push(NodeKind::Output);
        let mut edges = Vec::new();
        let mut incoming = vec![Vec::new(); nodes.len()];
        for (dst, &d) in nodes.iter().enumerate() {
            for (src, &s) in nodes.iter().enumerate().take(dst) {
                // heads in one layer read the same residual, so they never feed each other
                let same_layer_heads = matches!(
                    (s, d),
                    (NodeKind::Head { layer: a, .. }, NodeKind::Head { layer: b, .. }) if a == b
                );
                if !same_layer_heads {
                    incoming[dst].push(edges.len());
                    edges.push((src, dst));
                }
            }
        }
        Self {
            nodes,
            edges,
            incoming,
        }
    }

    /// Edge indices into `dst`, in source order.
    pub fn incoming(&self, dst: usize) -> &[usize] {
        &self.incoming[dst]
    }
}

/// One edge of a discovered circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub retained: bool,
    /// Change in mean KL when this edge was patched.
    pub kl_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeRecord>,
    /// Non-finite values serialize as `null`.
    pub tau: f64,
    pub edge_count: usize,
    /// Mean KL of the final circuit against the full model.
    pub kl: f64,
}

impl CircuitGraph {
    pub fn retained_mask(&self) -> Vec<bool> {
        self.edges.iter().map(|e| e.retained).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Graphviz rendering of the retained edges.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph circuit {\n  rankdir=BT;\n");
        for n in &self.nodes {
            let _ = writeln!(out, "  \"{n}\";");
        }
        for e in self.edges.iter().filter(|e| e.retained) {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{:.4}\"];",
                e.src, e.dst, e.kl_delta
            );
        }
        out.push_str("}\n");
        out
    }
}

struct HeadWeights {
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    o: Tensor<f64>,
    /// The output bias split evenly across heads.
    bias: Tensor<f64>,
}

fn columns(w: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let data = w
        .rows()
        .flat_map(|r| r[start..start + len].iter().copied())
        .collect();
    Tensor::new(vec![w.shape()[0], len], data).expect("column slice")
}

fn add_row(x: &mut Tensor<f64>, b: &Tensor<f64>) {
    for row in x.rows_mut() {
        row.iter_mut().zip(b.data()).for_each(|(v, &c)| *v += c);
    }
}

struct PromptState {
    clean: Vec<u32>,
    /// Corrupt-run output of every non-output node.
    corrupt: Vec<Tensor<f64>>,
    /// Current-circuit output of every non-output node.
    current: Vec<Tensor<f64>>,
    /// Full-model logits at the last position.
    reference: Vec<f64>,
}

/// Runs a model as a graph of components with per-edge patching.
pub struct PatchHarness {
    model: Model<f64>,
    graph: ComponentGraph,
    heads: Vec<Vec<HeadWeights>>,
    prompts: Vec<PromptState>,
}

impl PatchHarness {
    pub fn new(model: &Model<f32>, prompts: &[IoiPrompt]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("no prompts for circuit discovery".into()));
        }
        let model = model.cast::<f64>();
        let c = model.config();
        let graph = ComponentGraph::new(c.n_layers, c.n_heads);
        let dh = c.d_head();
        let p = model.params().tensors();
        let heads = model
            .layout()
            .blocks
            .iter()
            .map(|l| {
                let mut bias = p[l.o_b].clone();
                bias.scale_in_place(1.0 / c.n_heads as f64);
                (0..c.n_heads)
                    .map(|h| {
                        let o = p[l.o_w].data()[h * dh * c.d_model..(h + 1) * dh * c.d_model].to_vec();
                        HeadWeights {
                            q: columns(&p[l.q], h * dh, dh),
                            k: columns(&p[l.k], h * dh, dh),
                            v: columns(&p[l.v], h * dh, dh),
                            o: Tensor::new(vec![dh, c.d_model], o).expect("row slice"),
                            bias: bias.clone(),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut harness = Self {
            model,
            graph,
            heads,
            prompts: Vec::new(),
        };
        let states = prompts
            .par_iter()
            .map(|pr| harness.prompt_state(pr))
            .collect::<Result<Vec<_>>>()?;
        harness.prompts = states;
        Ok(harness)
    }

    pub fn graph(&self) -> &ComponentGraph {
        &self.graph
    }

    fn prompt_state(&self, prompt: &IoiPrompt) -> Result<PromptState> {
        let (clean, corrupt) = prompt.token_pair();
        if clean.len() != corrupt.len() {
            return Err(Error::InvalidArgument(format!(
                "clean and corrupt prompts differ in length: {:?} / {:?}",
                prompt.clean, prompt.corrupt
            )));
        }
        let all = vec![true; self.graph.edges.len()];
        let n = self.graph.nodes.len() - 1;
        let blank = vec![Tensor::zeros([0]); n];
        let mut corrupt_out = blank.clone();
        corrupt_out[0] = self.embed(&corrupt)?;
        self.run_from(&all, &blank, &mut corrupt_out, 1)?;
        let mut current = blank;
        current[0] = self.embed(&clean)?;
        self.run_from(&all, &corrupt_out, &mut current, 1)?;
        let logits = self.model.forward_inference(&TokenBatch::single(&clean)?)?;
        let v = self.model.config().vocab_size;
        let reference = logits.data()[logits.numel() - v..].to_vec();
        Ok(PromptState {
            clean,
            corrupt: corrupt_out,
            current,
            reference,
        })
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        let p = self.model.params().tensors();
        let lay = self.model.layout();
        let d = self.model.config().d_model;
        if tokens.len() > self.model.config().max_pos {
            return Err(Error::InvalidArgument(format!(
                "prompt of {} tokens exceeds max_pos",
                tokens.len()
            )));
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            let tok = &p[lay.wte].data()[t as usize * d..(t as usize + 1) * d];
            let wpe = &p[lay.wpe].data()[pos * d..(pos + 1) * d];
            data.extend(tok.iter().zip(wpe).map(|(a, b)| a + b));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    fn input(
        &self,
        dst: usize,
        retained: &[bool],
        corrupt: &[Tensor<f64>],
        current: &[Tensor<f64>],
    ) -> Tensor<f64> {
        let mut acc: Option<Tensor<f64>> = None;
        for &e in self.graph.incoming(dst) {
            let src = self.graph.edges[e].0;
            let part = if retained[e] { &current[src] } else { &corrupt[src] };
            match acc.as_mut() {
                Some(a) => a.add_assign(part).expect("residual shapes agree"),
                None => acc = Some(part.clone()),
            }
        }
        acc.expect("every non-embed node has an incoming edge")
    }

    fn node_output(&self, node: NodeKind, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let p = self.model.params().tensors();
        let lay = self.model.layout();
        match node {
            NodeKind::Head { layer, head } => {
                let l = &lay.blocks[layer];
                let w = &self.heads[layer][head];
                let (xn, _, _) = kernels::layer_norm(x, &p[l.ln1_g], &p[l.ln1_b], LN_EPS)?;
                let q = kernels::matmul(&xn, &w.q, false, false)?;
                let k = kernels::matmul(&xn, &w.k, false, false)?;
                let v = kernels::matmul(&xn, &w.v, false, false)?;
                let mut scores = kernels::matmul(&q, &k, false, true)?;
                scores.scale_in_place(1.0 / (self.model.config().d_head() as f64).sqrt());
                let att = kernels::causal_softmax(&scores)?;
                let z = kernels::matmul(&att, &v, false, false)?;
                let mut out = kernels::matmul(&z, &w.o, false, false)?;
                add_row(&mut out, &w.bias);
                Ok(out)
            }
            NodeKind::Mlp { layer } => {
                let l = &lay.blocks[layer];
                let (xn, _, _) = kernels::layer_norm(x, &p[l.ln2_g], &p[l.ln2_b], LN_EPS)?;
                let mut hidden = kernels::matmul(&xn, &p[l.fc_w], false, false)?;
                add_row(&mut hidden, &p[l.fc_b]);
                let hidden = hidden.map(kernels::gelu);
                let mut out = kernels::matmul(&hidden, &p[l.proj_w], false, false)?;
                add_row(&mut out, &p[l.proj_b]);
                Ok(out)
            }
            NodeKind::Embed | NodeKind::Output => unreachable!("not a residual writer"),
        }
    }

    fn logits(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        let p = self.model.params().tensors();
        let lay = self.model.layout();
        let d = x.last_dim();
        let last = Tensor::new(vec![1, d], x.data()[x.numel() - d..].to_vec())?;
        let (h, _, _) = kernels::layer_norm(&last, &p[lay.lnf_g], &p[lay.lnf_b], LN_EPS)?;
        Ok(kernels::matmul(&h, &p[lay.wte], false, true)?.into_data())
    }

    /// Recomputes nodes `from..` into `current`; returns last-position logits.
    fn run_from(
        &self,
        retained: &[bool],
        corrupt: &[Tensor<f64>],
        current: &mut [Tensor<f64>],
        from: usize,
    ) -> Result<Vec<f64>> {
        let out = self.graph.nodes.len() - 1;
        for node in from.max(1)..out {
            let x = self.input(node, retained, corrupt, current);
            current[node] = self.node_output(self.graph.nodes[node], &x)?;
        }
        let x = self.input(out, retained, corrupt, current);
        self.logits(&x)
    }

    /// Last-position logits per prompt for an arbitrary retained-edge mask.
    pub fn last_logits(&self, retained: &[bool]) -> Result<Vec<Vec<f64>>> {
        self.check_mask(retained)?;
        self.prompts
            .par_iter()
            .map(|s| {
                let mut current = s.current.clone();
                current[0] = self.embed(&s.clean)?;
                self.run_from(retained, &s.corrupt, &mut current, 1)
            })
            .collect()
    }

    /// Full-model last-position logits per prompt.
    pub fn reference_logits(&self) -> Vec<&[f64]> {
        self.prompts.iter().map(|s| s.reference.as_slice()).collect()
    }

    /// Mean KL(full model ‖ circuit) at the last position.
    pub fn mean_kl(&self, retained: &[bool]) -> Result<f64> {
        let logits = self.last_logits(retained)?;
        let kls = logits
            .iter()
            .zip(&self.prompts)
            .map(|(q, s)| kl_divergence(&s.reference, q))
            .collect::<Result<Vec<_>>>()?;
        Ok(kls.iter().sum::<f64>() / kls.len() as f64)
    }

    fn check_mask(&self, retained: &[bool]) -> Result<()> {
        if retained.len() != self.graph.edges.len() {
            return Err(Error::InvalidArgument(format!(
                "mask has {} entries for {} edges",
                retained.len(),
                self.graph.edges.len()
            )));
        }
        Ok(())
    }

    /// Greedy pruning sweep: destinations in reverse topological order, each
    /// destination's sources in reverse order. An edge is dropped for good
    /// when patching it raises the mean KL by less than `tau`.
    pub fn prune(mut self, tau: f64) -> Result<CircuitGraph> {
        if tau.is_nan() || tau < 0.0 {
            return Err(Error::InvalidArgument(format!("tau must be >= 0, got {tau}")));
        }
        let n_edges = self.graph.edges.len();
        let mut retained = vec![true; n_edges];
        let mut kl_delta = vec![0.0; n_edges];
        let mut current_kl = self.mean_kl(&retained)?;
        for dst in (1..self.graph.nodes.len()).rev() {
            for &e in self.graph.incoming(dst).to_vec().iter().rev() {
                retained[e] = false;
                let trial = self
                    .prompts
                    .par_iter()
                    .map(|s| {
                        let mut current = s.current.clone();
                        let q = self.run_from(&retained, &s.corrupt, &mut current, dst)?;
                        Ok((kl_divergence(&s.reference, &q)?, current))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let new_kl = trial.iter().map(|t| t.0).sum::<f64>() / trial.len() as f64;
                kl_delta[e] = new_kl - current_kl;
                if kl_delta[e] < tau {
                    current_kl = new_kl;
                    for (s, (_, current)) in self.prompts.iter_mut().zip(trial) {
                        s.current = current;
                    }
                } else {
                    retained[e] = true;
                }
            }
        }
        let names: Vec<String> = self.graph.nodes.iter().map(|n| n.name()).collect();
        let edges = self
            .graph
            .edges
            .iter()
            .enumerate()
            .map(|(i, &(s, d))| EdgeRecord {
                src: names[s].clone(),
                dst: names[d].clone(),
                retained: retained[i],
                kl_delta: kl_delta[i],
            })
            .collect();
        Ok(CircuitGraph {
            nodes: names,
            edges,
            tau,
            edge_count: retained.iter().filter(|&&r| r).count(),
            kl: current_kl,
        })
    }
}

/// Prunes the component graph of `model` on `prompts` at threshold `tau`.
pub fn discover_circuit(model: &Model<f32>, prompts: &[IoiPrompt], tau: f64) -> Result<CircuitGraph> {
    PatchHarness::new(model, prompts)?.prune(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ioi::{generate_ioi, IoiPools};
    use crate::model::{AblationMode, ModelConfig};

    fn model() -> Model<f32> {
        let mut c = ModelConfig::desk(AblationMode::None, 1);
        c.d_model = 16;
        c.d_mlp = 32;
        c.n_heads = 2;
        c.max_pos = 96;
        c.seed = 3;
        Model::new(c).unwrap()
    }

    #[test]
    fn edge_count_for_two_layers_four_heads() {
        let g = ComponentGraph::new(2, 4);
        assert_eq!(g.nodes.len(), 1 + 2 * 5 + 1);
        assert_eq!(g.edges.len(), 54);
        assert!(g.edges.iter().all(|&(s, d)| s < d));
    }

    #[test]
    fn all_retained_matches_model() {
        let prompts = generate_ioi(4, 1, &IoiPools::default()).unwrap();
        let h = PatchHarness::new(&model(), &prompts).unwrap();
        let all = vec![true; h.graph().edges.len()];
        let got = h.last_logits(&all).unwrap();
        for (g, r) in got.iter().zip(h.reference_logits()) {
            let err = g.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
        assert!(h.mean_kl(&all).unwrap() < 1e-12);
    }

    #[test]
    fn tau_extremes() {
        let prompts = generate_ioi(4, 2, &IoiPools::default()).unwrap();
        let m = model();
        let none = discover_circuit(&m, &prompts, f64::INFINITY).unwrap();
        assert_eq!(none.edge_count, 0);
        let strict = discover_circuit(&m, &prompts, 0.0).unwrap();
        for e in &strict.edges {
            assert_eq!(e.retained, e.kl_delta >= 0.0, "{e:?}");
        }
        assert!(none.to_dot().starts_with("digraph"));
    }
}
