//! Tape-free numeric kernels shared by the autodiff ops, the inference path
//! and the patching forward used by circuit discovery.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `c = op(a)·op(b) + beta·c` for row-major buffers.
///
/// `op(a)` is `m×k`; when `ta` is set `a` is stored as `k×m`. Likewise `op(b)`
/// is `k×n` and is stored `n×k` when `tb` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent the strides address.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved dimensions of a (possibly batched) matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single rank-2 matrix shared across the batch.
    pub shared_rhs: bool,
}

/// Validates shapes for `op(a)·op(b)` and returns the output shape.
///
/// `a` has rank ≥ 2 and its leading axes are batch axes. `b` is either rank 2
/// (shared across the batch) or has exactly `a`'s batch axes. A transposed
/// `a` requires a batched `b`.
pub fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let ra = a.len();
    let rb = b.len();
    let (m, ka) = if ta {
        (a[ra - 1], a[ra - 2])
    } else {
        (a[ra - 2], a[ra - 1])
    };
    let (kb, n) = if tb {
        (b[rb - 1], b[rb - 2])
    } else {
        (b[rb - 2], b[rb - 1])
    };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {a:?} x {b:?} (ta={ta}, tb={tb})"),
        ));
    }
    let batch_axes = &a[..ra - 2];
    let shared_rhs = rb == 2;
    if !shared_rhs && &b[..rb - 2] != batch_axes {
        return Err(Error::shape(
            "matmul",
            format!("batch axes differ: {a:?} x {b:?}"),
        ));
    }
    if shared_rhs && ta && ra > 2 {
        return Err(Error::shape(
            "matmul",
            "transposed batched lhs needs a batched rhs",
        ));
    }
    let batch = batch_axes.iter().product();
    let mut out = batch_axes.to_vec();
    out.extend([m, n]);
    Ok((
        MatmulDims {
            batch,
            m,
            k: ka,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// Batched or broadcast matrix product; see [`matmul_dims`] for the shape rules.
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>, ta: bool, tb: bool) -> Result<Tensor<F>> {
    let (dims, out_shape) = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let mut out = vec![F::zero(); dims.batch * dims.m * dims.n];
    matmul_into(&dims, ta, tb, a.data(), b.data(), F::zero(), &mut out);
    Tensor::new(out_shape, out)?.check_finite("matmul")
}

pub(crate) fn matmul_into<F: Float>(
    d: &MatmulDims,
    ta: bool,
    tb: bool,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    let MatmulDims { batch, m, k, n, .. } = *d;
    if d.shared_rhs && !ta {
        gemm(false, tb, batch * m, k, n, a, b, beta, c);
        return;
    }
    let a_step = m * k;
    let c_step = m * n;
    let b_step = if d.shared_rhs { 0 } else { k * n };
    let one = |(i, ci): (usize, &mut [F])| {
        let ai = &a[i * a_step..(i + 1) * a_step];
        let bi = &b[i * b_step..i * b_step + k * n];
        gemm(ta, tb, m, k, n, ai, bi, beta, ci);
    };
    // a single-thread pool only adds hand-off latency
    if rayon::current_num_threads() > 1 {
        c.par_chunks_mut(c_step.max(1)).enumerate().for_each(one);
    } else {
        c.chunks_mut(c_step.max(1)).enumerate().for_each(one);
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<F: Float>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| data[idx(j)]).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[idx(j)] /= total;
            }
        }
    }
    out.check_finite("softmax")
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along `axis`, accumulated into `dx`.
pub(crate) fn softmax_backward<F: Float>(y: &Tensor<F>, dy: &[F], axis: usize, dx: &mut [F]) -> Result<()> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let y = y.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: F = (0..len).map(|j| dy[base + j * inner] * y[base + j * inner]).sum();
            for j in 0..len {
                let p = base + j * inner;
                dx[p] += y[p] * (dy[p] - dot);
            }
        }
    }
    Ok(())
}

/// Softmax over the last axis of `[.., T, T]` scores with future positions
/// (column > row) given probability zero.
pub fn causal_softmax<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::shape(
            "causal_softmax",
            format!("expected [.., T, T], got {shape:?}"),
        ));
    }
    let t = shape[shape.len() - 1];
    let mut out = x.clone();
    out.data_mut().par_chunks_mut(t * t).for_each(|mat| {
        for (r, row) in mat.chunks_exact_mut(t).enumerate() {
            let (live, future) = row.split_at_mut(r + 1);
            let max = live.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in live.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in live.iter_mut() {
                *v /= total;
            }
            future.fill(F::zero());
        }
    });
    out.check_finite("causal_softmax")
}

/// Row-wise layer normalization. Returns `(output, mean, rstd)` per row.
pub fn layer_norm<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {:?} / bias {:?} must be [{d}]", gain.shape(), bias.shape()),
        ));
    }
    let rows = x.numel() / d.max(1);
    let mut out = x.clone();
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(eps);
    for row in out.rows_mut() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * rstd * g + b;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((out.check_finite("layer_norm")?, means, rstds))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation (GPT-2 / GPT-Neo `gelu_new`).
pub fn gelu<F: Float>(x: F) -> F {
    gelu_parts(x).0
}

/// GELU output together with the inner `tanh`, which the gradient reuses.
pub fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh_fast();
    (F::of(0.5) * x * (F::one() + t), t)
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    gelu_grad_with(x, gelu_parts(x).1)
}

/// Derivative of GELU at `x` given `t = tanh(c·(x + a·x³))`.
pub fn gelu_grad_with<F: Float>(x: F, t: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let du = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Float>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return Tensor::new(out_shape, out);
    }
    // Innermost output axis is copied in a tight loop.
    let last = rank - 1;
    let last_len = out_shape[last];
    let last_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = (0..last).map(|i| idx[i] * strides[i]).sum();
        out.extend((0..last_len).map(|j| src[base + j * last_stride]));
        for i in (0..last).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Mean token cross-entropy over rows of `[.., V]` logits, plus the row softmax.
pub fn cross_entropy<F: Float>(logits: &Tensor<F>, targets: &[u32]) -> Result<(F, Tensor<F>)> {
    let v = logits.last_dim();
    let rows = logits.numel() / v.max(1);
    if rows != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{rows} logit rows vs {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InvalidArgument(format!(
            "target id {bad} out of range for vocab {v}"
        )));
    }
    let mut probs = logits.clone();
    let mut total = 0.0f64;
    for (row, &t) in probs.rows_mut().zip(targets) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let shifted = row[t as usize] - max;
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        total += (sum.ln() - shifted).as_f64();
        let inv = F::one() / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    let loss = F::of(total / rows.max(1) as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i, &m, false, false).unwrap(), m);
    }

    #[test]
    fn projector_matmul() {
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let m = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let out = matmul(&p, &m, false, false).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn transposed_and_batched_products_agree() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let b = t(&[2, 3, 2], &[1., 0., 0., 1., 1., 1., 2., 0., 0., 2., 1., -1.]);
        let direct = matmul(&a, &b, false, false).unwrap();
        let bt = permute(&b, &[0, 2, 1]).unwrap();
        let via_t = matmul(&a, &bt, false, true).unwrap();
        assert_eq!(direct, via_t);
        assert_eq!(direct.shape(), &[2, 2, 2]);
        assert_eq!(&direct.data()[..4], &[4., 5., 10., 11.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(matmul(&a, &b, false, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = softmax(&t(&[4], &[1.5, 0.5, -0.5, -1.5]), 0).unwrap();
        let want = [0.6439, 0.2369, 0.0871, 0.0321];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 5e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let s = softmax(&t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]), 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-12);
        assert!(softmax(&t(&[2], &[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = causal_softmax(&t(&[2, 2], &[0.3, 9.0, 1.0, 1.0])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let (c, _, _) = layer_norm(&t(&[2], &[3.0, 3.0]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let (n, _, _) = layer_norm(&t(&[2], &[1.0, -1.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((n.data()[0] - 1.0).abs() < 1e-9 && (n.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&t(&[1, 3], &[50.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(l < 1e-12);
        let (l, _) = cross_entropy(&Tensor::<f64>::zeros([2, 256]), &[3, 200]).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&t(&[1, 2], &[0.0, 3f64.ln()]), &[1]).unwrap();
        assert!((l + (0.75f64).ln()).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);
        assert!(matches!(
            cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let p = permute(&x, &[1, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 2]);
        assert_eq!(p.data()[1], 12.0);
        let back = permute(&p, &inverse_permutation(&[1, 2, 0])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
