//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the records in exact reverse order, accumulating
//! gradients additively into every input that requires them, and then clears
//! the tape. A fresh tape is built for each training step.
//!
//! ```
//! use selfablate::tape::Tape;
//! use selfablate::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
//! let loss = w.mul(w).unwrap().sum().unwrap().scale(0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, MatmulDims};
use crate::kwta;
use crate::tensor::{Float, Tensor};

type Id = usize;

enum Op<F> {
    Leaf,
    MatMul {
        a: Id,
        b: Id,
        ta: bool,
        tb: bool,
        dims: MatmulDims,
    },
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddBias {
        a: Id,
        bias: Id,
    },
    MulGroups {
        a: Id,
        mask: Id,
        group: usize,
    },
    Scale {
        a: Id,
        c: F,
    },
    Gelu {
        a: Id,
        /// Inner `tanh` from the forward pass.
        t: Vec<F>,
    },
    Relu(Id),
    Abs(Id),
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        a: Id,
        axis: usize,
    },
    CausalSoftmax(Id),
    Embedding {
        table: Id,
        ids: Vec<u32>,
    },
    Reshape(Id),
    Permute {
        a: Id,
        perm: Vec<usize>,
    },
    Sum(Id),
    Mean(Id),
    CrossEntropy {
        logits: Id,
        targets: Vec<u32>,
        probs: Tensor<F>,
    },
    SteGate {
        scores: Id,
        weights: Tensor<F>,
        temps: Vec<F>,
    },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation recorder. Confined to one thread.
pub struct Tape<F: Float = f32> {
    nodes: RefCell<Vec<Node<F>>>,
    grad_enabled: bool,
    gate_sorts: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
///
/// Handles become invalid once [`Tape::backward`] clears the tape.
pub struct Var<'t, F: Float = f32> {
    tape: &'t Tape<F>,
    id: Id,
}

impl<F: Float> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Float> Copy for Var<'_, F> {}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            gate_sorts: Cell::new(0),
        }
    }

    /// A tape that evaluates values only; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of per-position sorts performed by gate ops on this tape.
    pub fn gate_sorts(&self) -> u64 {
        self.gate_sorts.get()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_leaf(Rc::new(value), self.grad_enabled)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_leaf(Rc::new(value), false)
    }

    fn push_leaf(&self, value: Rc<Tensor<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[Id]) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let Some(root) = nodes.get(loss.id) else {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        };
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), F::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
        }
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaf parameters, keyed by the [`Var`] that created them.
pub struct Gradients<F: Float = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn slot<'g, F: Float>(
    grads: &'g mut [Option<Tensor<F>>],
    nodes: &[Node<F>],
    id: Id,
) -> Option<&'g mut Tensor<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape().to_vec())))
}

fn backprop<F: Float>(
    nodes: &[Node<F>],
    id: Id,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) -> Result<()> {
    let val = |i: Id| nodes[i].value.as_ref();
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb, dims } => {
            let (ta, tb) = (*ta, *tb);
            let MatmulDims {
                batch,
                m,
                k,
                n,
                shared_rhs,
            } = *dims;
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                let da = da.data_mut();
                if !ta {
                    let d = MatmulDims {
                        batch,
                        m,
                        k: n,
                        n: k,
                        shared_rhs,
                    };
                    kernels::matmul_into(&d, false, !tb, gd, bv.data(), F::one(), da);
                } else {
                    for i in 0..batch {
                        kernels::gemm(
                            tb,
                            true,
                            k,
                            n,
                            m,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &gd[i * m * n..(i + 1) * m * n],
                            F::one(),
                            &mut da[i * k * m..(i + 1) * k * m],
                        );
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                let db = db.data_mut();
                if shared_rhs {
                    let rows = batch * m;
                    if !tb {
                        kernels::gemm(!ta, false, k, rows, n, av.data(), gd, F::one(), db);
                    } else {
                        kernels::gemm(true, ta, n, rows, k, gd, av.data(), F::one(), db);
                    }
                } else {
                    for i in 0..batch {
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &mut db[i * k * n..(i + 1) * k * n];
                        if !tb {
                            kernels::gemm(!ta, false, k, m, n, ai, gi, F::one(), bi);
                        } else {
                            kernels::gemm(true, ta, n, m, k, gi, ai, F::one(), bi);
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for i in [*a, *b] {
                if let Some(d) = slot(grads, nodes, i) {
                    d.add_assign(g)?;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.add_assign(g)?;
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for (x, &y) in d.data_mut().iter_mut().zip(gd) {
                    *x -= y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(grads, nodes, *a) {
                for ((x, &y), &o) in d.data_mut().iter_mut().zip(gd).zip(bv.data()) {
                    *x += y * o;
                }
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for ((x, &y), &o) in d.data_mut().iter_mut().zip(gd).zip(av.data()) {
                    *x += y * o;
                }
            }
        }
        Op::AddBias { a, bias } => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.add_assign(g)?;
            }
            if let Some(d) = slot(grads, nodes, *bias) {
                let db = d.data_mut();
                for row in g.rows() {
                    for (x, &y) in db.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
        Op::MulGroups { a, mask, group } => {
            let (av, mv) = (val(*a), val(*mask));
            let group = *group;
            if let Some(d) = slot(grads, nodes, *a) {
                for ((dx, gg), &m) in d
                    .data_mut()
                    .chunks_exact_mut(group)
                    .zip(gd.chunks_exact(group))
                    .zip(mv.data())
                {
                    for (x, &y) in dx.iter_mut().zip(gg) {
                        *x += y * m;
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *mask) {
                for ((dm, gg), aa) in d
                    .data_mut()
                    .iter_mut()
                    .zip(gd.chunks_exact(group))
                    .zip(av.data().chunks_exact(group))
                {
                    *dm += gg.iter().zip(aa).map(|(&x, &y)| x * y).sum::<F>();
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(d) = slot(grads, nodes, *a) {
                for (x, &y) in d.data_mut().iter_mut().zip(gd) {
                    *x += y * *c;
                }
            }
        }
        Op::Gelu { a, t } => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for (((x, &y), &v), &t) in d.data_mut().iter_mut().zip(gd).zip(av.data()).zip(t) {
                    *x += y * kernels::gelu_grad_with(v, t);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((x, &y), &v) in d.data_mut().iter_mut().zip(gd).zip(av.data()) {
                    if v > F::zero() {
                        *x += y;
                    }
                }
            }
        }
        Op::Abs(a) => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((x, &y), &v) in d.data_mut().iter_mut().zip(gd).zip(av.data()) {
                    if v > F::zero() {
                        *x += y;
                    } else if v < F::zero() {
                        *x -= y;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gv = val(*gain);
            let dim = xv.last_dim();
            let inv_d = F::of(1.0 / dim as f64);
            if let Some(d) = slot(grads, nodes, *gain) {
                let dg = d.data_mut();
                for (r, (row, gr)) in xv.rows().zip(g.rows()).enumerate() {
                    for ((acc, &v), &y) in dg.iter_mut().zip(row).zip(gr) {
                        *acc += y * (v - mean[r]) * rstd[r];
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *bias) {
                let db = d.data_mut();
                for gr in g.rows() {
                    for (acc, &y) in db.iter_mut().zip(gr) {
                        *acc += y;
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *x) {
                for (r, ((dx, row), gr)) in d.rows_mut().zip(xv.rows()).zip(g.rows()).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut mean_dxh = F::zero();
                    let mut mean_dxh_xh = F::zero();
                    for ((&v, &y), &gain) in row.iter().zip(gr).zip(gv.data()) {
                        let xh = (v - mu) * rs;
                        let dxh = y * gain;
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for (((acc, &v), &y), &gain) in dx.iter_mut().zip(row).zip(gr).zip(gv.data()) {
                        let xh = (v - mu) * rs;
                        *acc += rs * (y * gain - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = nodes[id].value.as_ref();
            if let Some(d) = slot(grads, nodes, *a) {
                kernels::softmax_backward(y, gd, *axis, d.data_mut())?;
            }
        }
        Op::CausalSoftmax(a) => {
            let y = nodes[id].value.as_ref();
            if let Some(d) = slot(grads, nodes, *a) {
                kernels::softmax_backward(y, gd, y.rank() - 1, d.data_mut())?;
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(d) = slot(grads, nodes, *table) {
                let dim = d.last_dim();
                let dt = d.data_mut();
                for (&tok, gr) in ids.iter().zip(gd.chunks_exact(dim)) {
                    let row = &mut dt[tok as usize * dim..(tok as usize + 1) * dim];
                    for (x, &y) in row.iter_mut().zip(gr) {
                        *x += y;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                for (x, &y) in d.data_mut().iter_mut().zip(gd) {
                    *x += y;
                }
            }
        }
        Op::Permute { a, perm } => {
            if let Some(d) = slot(grads, nodes, *a) {
                let back = kernels::permute(g, &kernels::inverse_permutation(perm))?;
                d.add_assign(&back)?;
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            let scale = match &nodes[id].op {
                Op::Mean(_) => F::of(1.0 / val(*a).numel().max(1) as f64),
                _ => F::one(),
            };
            let y = gd[0] * scale;
            if let Some(d) = slot(grads, nodes, *a) {
                for x in d.data_mut() {
                    *x += y;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(d) = slot(grads, nodes, *logits) {
                let scale = gd[0] / F::of(targets.len().max(1) as f64);
                for ((dx, p), &t) in d.rows_mut().zip(probs.rows()).zip(targets) {
                    for (x, &q) in dx.iter_mut().zip(p) {
                        *x += q * scale;
                    }
                    dx[t as usize] -= scale;
                }
            }
        }
        Op::SteGate {
            scores,
            weights,
            temps,
        } => {
            if let Some(d) = slot(grads, nodes, *scores) {
                for (((dx, w), gr), &t) in d.rows_mut().zip(weights.rows()).zip(g.rows()).zip(temps) {
                    if t <= F::zero() {
                        // pass-through row: gate is inert
                        continue;
                    }
                    let dot: F = w.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((x, &wi), &gi) in dx.iter_mut().zip(w).zip(gr) {
                        *x += wi * (gi - dot) / t;
                    }
                }
            }
        }
    }
    Ok(())
}

impl<'t, F: Float> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("vars belong to different tapes".into()))
        }
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.push_leaf(self.value(), false)
    }

    /// `op(self)·op(other)`; see [`kernels::matmul_dims`] for shape rules.
    pub fn matmul_ex(self, other: Var<'t, F>, ta: bool, tb: bool) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (av, bv) = (self.value(), other.value());
        let (dims, shape) = kernels::matmul_dims(av.shape(), bv.shape(), ta, tb)?;
        let mut out = vec![F::zero(); dims.batch * dims.m * dims.n];
        kernels::matmul_into(&dims, ta, tb, av.data(), bv.data(), F::zero(), &mut out);
        let out = Tensor::new(shape, out)?.check_finite("matmul")?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                dims,
            },
            &[self.id, other.id],
        ))
    }

    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_ex(other, false, true)
    }

    fn binary(
        self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: fn(Id, Id) -> Op<F>,
    ) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let out = self
            .value()
            .zip_map(&other.value(), name, f)?
            .check_finite(name)?;
        Ok(self.tape.push(out, op(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a `[d]` bias to every row of `[.., d]`.
    pub fn add_bias(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&bias)?;
        let (av, bv) = (self.value(), bias.value());
        let d = av.last_dim();
        if bv.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs input {:?}", bv.shape(), av.shape()),
            ));
        }
        let mut out = (*av).clone();
        for row in out.rows_mut() {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = out.check_finite("add_bias")?;
        Ok(self.tape.push(
            out,
            Op::AddBias {
                a: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        ))
    }

    /// Multiplies consecutive groups of the flattened input by one mask entry
    /// each: `out[i] = self[i] * mask[i / group]`.
    pub fn mul_groups(self, mask: Var<'t, F>, group: usize) -> Result<Var<'t, F>> {
        self.same_tape(&mask)?;
        let (av, mv) = (self.value(), mask.value());
        if group == 0 || av.numel() != mv.numel() * group {
            return Err(Error::shape(
                "mul_groups",
                format!(
                    "input {:?} is not mask {:?} times group {group}",
                    av.shape(),
                    mv.shape()
                ),
            ));
        }
        let mut out = (*av).clone();
        for (chunk, &m) in out.data_mut().chunks_exact_mut(group).zip(mv.data()) {
            for x in chunk {
                *x *= m;
            }
        }
        let out = out.check_finite("mul_groups")?;
        Ok(self.tape.push(
            out,
            Op::MulGroups {
                a: self.id,
                mask: mask.id,
                group,
            },
            &[self.id, mask.id],
        ))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, F>> {
        let c = F::of(c);
        let out = self.value().map(|v| v * c).check_finite("scale")?;
        Ok(self.tape.push(out, Op::Scale { a: self.id, c }, &[self.id]))
    }

    pub fn gelu(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (y, t): (Vec<F>, Vec<F>) = x.data().iter().map(|&v| kernels::gelu_parts(v)).unzip();
        let out = Tensor::new(x.shape().to_vec(), y)?.check_finite("gelu")?;
        Ok(self.tape.push(out, Op::Gelu { a: self.id, t }, &[self.id]))
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        let out = self.value().map(|v| v.max(F::zero()));
        Ok(self.tape.push(out, Op::Relu(self.id), &[self.id]))
    }

    pub fn abs(self) -> Result<Var<'t, F>> {
        let out = self.value().map(|v| v.abs());
        Ok(self.tape.push(out, Op::Abs(self.id), &[self.id]))
    }

    pub fn layer_norm(self, gain: Var<'t, F>, bias: Var<'t, F>, eps: f64) -> Result<Var<'t, F>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let (out, mean, rstd) = kernels::layer_norm(&self.value(), &gain.value(), &bias.value(), eps)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let out = kernels::softmax(&self.value(), axis)?;
        Ok(self.tape.push(out, Op::Softmax { a: self.id, axis }, &[self.id]))
    }

    /// Row softmax over `[.., T, T]` attention scores under a causal mask.
    pub fn causal_softmax(self) -> Result<Var<'t, F>> {
        let out = kernels::causal_softmax(&self.value())?;
        Ok(self.tape.push(out, Op::CausalSoftmax(self.id), &[self.id]))
    }

    /// Gathers rows of a `[V, d]` table; output shape is `shape ++ [d]`.
    pub fn embedding(self, ids: &[u32], shape: &[usize]) -> Result<Var<'t, F>> {
        let table = self.value();
        let [v, d] = table.shape() else {
            return Err(Error::shape(
                "embedding",
                format!("table must be rank 2, got {:?}", table.shape()),
            ));
        };
        let (v, d) = (*v, *d);
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids for shape {shape:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab {v}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            out.extend_from_slice(&table.data()[t as usize * d..(t as usize + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape.push(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, F>> {
        let out = kernels::permute(&self.value(), perm)?;
        Ok(self.tape.push(
            out,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let out = Tensor::scalar(self.value().sum()).check_finite("sum")?;
        Ok(self.tape.push(out, Op::Sum(self.id), &[self.id]))
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let out = Tensor::scalar(self.value().mean()).check_finite("mean")?;
        Ok(self.tape.push(out, Op::Mean(self.id), &[self.id]))
    }

    /// Mean token cross-entropy of `[.., V]` logits against `targets`.
    pub fn cross_entropy(self, targets: &[u32]) -> Result<Var<'t, F>> {
        let (loss, probs) = kernels::cross_entropy(&self.value(), targets)?;
        let probs = if self.tape.grad_enabled {
            probs
        } else {
            Tensor::zeros([0])
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            &[self.id],
        ))
    }

    /// Straight-through kWTA gate over the last axis of gate scores.
    ///
    /// The value is the binary top-`k` mask; the recorded derivative is that of
    /// the tempered softmax weights with threshold and temperature held fixed.
    pub fn ste_gate(self, k: usize) -> Result<Var<'t, F>> {
        let scores = self.value();
        let gate = kwta::gate_rows(&scores, k)?;
        self.tape.gate_sorts.set(self.tape.gate_sorts.get() + gate.sorts);
        Ok(self.tape.push(
            gate.mask,
            Op::SteGate {
                scores: self.id,
                weights: gate.weights,
                temps: gate.temps,
            },
            &[self.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
        let loss = w.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty(), "backward clears the tape");
    }

    #[test]
    fn half_square_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = w.mul(w).unwrap().sum().unwrap().scale(0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let y = w.add(w).unwrap().add(w).unwrap();
        let grads = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Shape { .. })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let y = w.mul(w.detach()).unwrap().sum().unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_rhs_transpose() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 2], &[1., -1., 0., 2., 3., 0.5]));
        let loss = a.matmul(b).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        // ones(2,2)·bᵀ: each row is the row sums of b.
        assert_eq!(grads.get(a).unwrap().data(), &[0., 2., 3.5, 0., 2., 3.5]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(!w.requires_grad());
        let y = w.mul(w).unwrap();
        assert_eq!(y.value().data(), &[1.0, 4.0]);
    }

    #[test]
    fn non_finite_results_surface_as_errors() {
        let tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new([1], vec![f32::MAX]).unwrap());
        assert!(matches!(w.scale(10.0), Err(Error::NonFinite { .. })));
    }
}
