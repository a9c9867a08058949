//! k-winners-take-all gating with a straight-through estimator.
//!
//! For every position the gate ranks the unit scores, keeps the top `k` as a
//! binary mask, and derives a threshold and temperature from the boundary
//! pair (the `k`-th and `k+1`-th largest scores):
//!
//! ```text
//! gamma = (x_k + x_{k+1}) / 2
//! T     = max(x_k - x_{k+1}, TEMP_FLOOR)
//! w_i   = softmax_i((x - gamma) / T)
//! ```
//!
//! The forward value is the mask; gradients flow as if the output were `w`,
//! with `gamma` and `T` held constant.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::Var;
use crate::tensor::{Float, Tensor};

/// Lower bound on the gate temperature; tied boundary scores give `T = 0`.
pub const TEMP_FLOOR: f64 = 1e-6;

/// Per-position relevance scores, units on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GateScores<F: Float = f32>(Tensor<F>);

/// Threshold and temperature per position (shape = scores without the unit axis).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdTemp<F: Float = f32> {
    pub gamma: Tensor<F>,
    pub temp: Tensor<F>,
}

/// Tempered softmax weights, same shape as the scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftWeights<F: Float = f32>(pub Tensor<F>);

/// Binary keep-mask, same shape as the scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationMask<F: Float = f32>(pub Tensor<F>);

impl<F: Float> GateScores<F> {
    pub fn new(x: Tensor<F>) -> Result<Self> {
        if x.rank() == 0 || x.last_dim() == 0 {
            return Err(Error::InvalidArgument(format!(
                "gate scores need at least one unit, shape {:?}",
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "gate_scores" });
        }
        Ok(Self(x))
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }

    pub fn n_units(&self) -> usize {
        self.0.last_dim()
    }

    fn position_shape(&self) -> Vec<usize> {
        let s = self.0.shape();
        s[..s.len() - 1].to_vec()
    }
}

/// Strict total order on units: higher score first, lower index on ties.
fn rank<F: Float>(row: &[F], a: usize, b: usize) -> Ordering {
    row[b]
        .partial_cmp(&row[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Unit indices ordered by descending score; ties keep the lower index first.
pub fn descending_order<F: Float>(row: &[F]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_unstable_by(|&a, &b| rank(row, a, b));
    order
}

/// Moves the `k` winners (`k < n`) to the front of `idx`, in no particular
/// order, and returns the k-th and (k+1)-th largest scores.
fn select_winners<F: Float>(row: &[F], k: usize, idx: &mut Vec<usize>) -> (F, F) {
    idx.clear();
    idx.extend(0..row.len());
    let (top, next, _) = idx.select_nth_unstable_by(k, |&a, &b| rank(row, a, b));
    let kth = top
        .iter()
        .copied()
        .max_by(|&a, &b| rank(row, a, b))
        .expect("k >= 1");
    (row[kth], row[*next])
}

/// Indices of the `k` largest entries along `axis`, largest first, ties to
/// the lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopK {
    /// Input shape with `axis` replaced by `k`.
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
}

pub fn topk_indices<F: Float>(x: &Tensor<F>, k: usize, axis: usize) -> Result<TopK> {
    let (outer, n, inner) = kernels::axis_split(x.shape(), axis)?;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for axis of size {n}"
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = k;
    let mut indices = vec![0; outer * k * inner];
    let mut lane = vec![F::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for (j, v) in lane.iter_mut().enumerate() {
                *v = x.data()[(o * n + j) * inner + i];
            }
            for (r, &j) in descending_order(&lane)[..k].iter().enumerate() {
                indices[(o * k + r) * inner + i] = j;
            }
        }
    }
    Ok(TopK { shape, indices })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(())
}

/// Threshold and temperature for one row. Leaves the winners at the front
/// of `idx` when `k < n`.
///
/// With `k >= n` there is no boundary pair; the gate is pass-through and the
/// threshold is reported at the smallest score with the temperature floor.
fn boundary<F: Float>(row: &[F], k: usize, idx: &mut Vec<usize>) -> (F, F) {
    if k >= row.len() {
        let min = row.iter().copied().fold(F::infinity(), F::min);
        return (min, F::of(TEMP_FLOOR));
    }
    let (hi, lo) = select_winners(row, k, idx);
    let gamma = (hi + lo) * F::of(0.5);
    let temp = (hi - lo).max(F::of(TEMP_FLOOR));
    (gamma, temp)
}

fn tempered_softmax<F: Float>(row: &[F], gamma: F, temp: F, out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let shift = (max - gamma) / temp;
    let mut total = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - gamma) / temp - shift).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn threshold_temperature<F: Float>(x: &GateScores<F>, k: usize) -> Result<ThresholdTemp<F>> {
    check_k(k)?;
    let mut gamma = Vec::new();
    let mut temp = Vec::new();
    let mut idx = Vec::new();
    for row in x.0.rows() {
        let (g, t) = boundary(row, k, &mut idx);
        gamma.push(g);
        temp.push(t);
    }
    let shape = x.position_shape();
    Ok(ThresholdTemp {
        gamma: Tensor::new(shape.clone(), gamma)?,
        temp: Tensor::new(shape, temp)?,
    })
}

pub fn soft_weights<F: Float>(x: &GateScores<F>, tt: &ThresholdTemp<F>) -> Result<SoftWeights<F>> {
    let positions = x.0.numel() / x.n_units();
    if tt.gamma.numel() != positions || tt.temp.numel() != positions {
        return Err(Error::shape(
            "soft_weights",
            format!(
                "{positions} positions vs gamma {:?} / temp {:?}",
                tt.gamma.shape(),
                tt.temp.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(x.0.shape().to_vec());
    for (((o, row), &g), &t) in out
        .rows_mut()
        .zip(x.0.rows())
        .zip(tt.gamma.data())
        .zip(tt.temp.data())
    {
        tempered_softmax(row, g, t, o);
    }
    Ok(SoftWeights(out.check_finite("soft_weights")?))
}

pub fn hard_mask<F: Float>(x: &GateScores<F>, k: usize) -> Result<AblationMask<F>> {
    check_k(k)?;
    if k >= x.n_units() {
        return Ok(AblationMask(Tensor::ones(x.0.shape().to_vec())));
    }
    let mut out = Tensor::zeros(x.0.shape().to_vec());
    let mut idx = Vec::new();
    for (o, row) in out.rows_mut().zip(x.0.rows()) {
        select_winners(row, k, &mut idx);
        for &i in &idx[..k] {
            o[i] = F::one();
        }
    }
    Ok(AblationMask(out))
}

/// Straight-through gate on a recorded score tensor; see [`Var::ste_gate`].
pub fn ste_gate<'t, F: Float>(scores: Var<'t, F>, k: usize) -> Result<Var<'t, F>> {
    scores.ste_gate(k)
}

/// Everything the tape needs from one gate evaluation.
pub(crate) struct GateRows<F: Float> {
    pub mask: Tensor<F>,
    pub weights: Tensor<F>,
    /// Per-row temperature; zero marks a pass-through row.
    pub temps: Vec<F>,
    pub sorts: u64,
}

pub(crate) fn gate_rows<F: Float>(scores: &Tensor<F>, k: usize) -> Result<GateRows<F>> {
    check_k(k)?;
    let n = scores.last_dim();
    if scores.rank() == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "gate scores need at least one unit".into(),
        ));
    }
    let mut mask = Tensor::zeros(scores.shape().to_vec());
    if k >= n {
        let rows = scores.numel() / n;
        return Ok(GateRows {
            mask: Tensor::ones(scores.shape().to_vec()),
            weights: Tensor::zeros([rows, 0]),
            temps: vec![F::zero(); rows],
            sorts: 0,
        });
    }
    let mut weights = Tensor::zeros(scores.shape().to_vec());
    let mut temps = Vec::with_capacity(scores.numel() / n);
    let mut idx = Vec::with_capacity(n);
    for ((row, m), w) in scores.rows().zip(mask.rows_mut()).zip(weights.rows_mut()) {
        let (gamma, temp) = boundary(row, k, &mut idx);
        for &i in &idx[..k] {
            m[i] = F::one();
        }
        tempered_softmax(row, gamma, temp, w);
        temps.push(temp);
    }
    let sorts = temps.len() as u64;
    Ok(GateRows {
        mask,
        weights: weights.check_finite("ste_gate")?,
        temps,
        sorts,
    })
}
