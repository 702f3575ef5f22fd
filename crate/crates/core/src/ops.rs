//! Eager tensor kernels. The tape in [`crate::autograd`] records these and
//! supplies their backward rules.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, lit, numel, strides, Scalar, Tensor};

/// LayerNorm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Norm floor for cosine similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;
/// Tolerance on probability vectors handed to [`kl_divergence`].
pub const PROBABILITY_TOL: f64 = 1e-5;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let (ra, rb) = (chunks_a.remainder(), chunks_b.remainder());
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Two dot products sharing the right-hand operand, same summation order as [`dot`].
#[inline]
pub(crate) fn dot2<T: Scalar>(a0: &[T], a1: &[T], b: &[T]) -> (T, T) {
    let mut acc0 = [T::zero(); 8];
    let mut acc1 = [T::zero(); 8];
    let c0 = a0.chunks_exact(8);
    let c1 = a1.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (r0, r1, rb) = (c0.remainder(), c1.remainder(), cb.remainder());
    for ((x0, x1), y) in c0.zip(c1).zip(cb) {
        for l in 0..8 {
            acc0[l] += x0[l] * y[l];
            acc1[l] += x1[l] * y[l];
        }
    }
    let (mut t0, mut t1) = (T::zero(), T::zero());
    for ((&x0, &x1), &y) in r0.iter().zip(r1).zip(rb) {
        t0 += x0 * y;
        t1 += x1 * y;
    }
    let fold = |acc: [T; 8], tail: T| {
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    };
    (fold(acc0, t0), fold(acc1, t1))
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
/// broadcasting over the leading batch axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); plan.out_shape.iter().product()];
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for (bi, (ao, bo)) in plan.offsets().into_iter().enumerate() {
        let a_mat = &a.data()[ao..ao + m * k];
        let b_mat = &b.data()[bo..bo + k * n];
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a_mat[i * k + p];
                if aip != T::zero() {
                    axpy(aip, &b_mat[p * n..(p + 1) * n], c_row);
                }
            }
        }
    }
    Tensor::new(plan.out_shape, out)
}

pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", a, b));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let batch = broadcast_shape(a_batch, b_batch).ok_or_else(|| Error::dim("matmul", a, b))?;
        let a_strides = broadcast_strides(a_batch, &batch);
        let b_strides = broadcast_strides(b_batch, &batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch,
            a_strides,
            b_strides,
            out_shape,
        })
    }

    /// Element offsets of the `a` and `b` matrices for each output batch index.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let count = numel(&self.batch);
        let mut idx = vec![0usize; self.batch.len()];
        let mut res = Vec::with_capacity(count);
        for _ in 0..count {
            let ao: usize = idx.iter().zip(&self.a_strides).map(|(i, s)| i * s).sum();
            let bo: usize = idx.iter().zip(&self.b_strides).map(|(i, s)| i * s).sum();
            res.push((ao * self.m * self.k, bo * self.k * self.n));
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < self.batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        res
    }
}

/// Affine map over the last axis: `x [..., in] * w[out, in]^T + b[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.last_dim() != w.shape()[1] || x.rank() == 0 {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::dim("linear bias", b.shape(), &[out_dim]));
        }
    }
    let rows = x.numel() / in_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    let wd = w.data();
    let xd = x.data();
    let mut r = 0;
    // two input rows at a time so each weight row is loaded once per pair
    while r + 2 <= rows {
        let x0 = &xd[r * in_dim..(r + 1) * in_dim];
        let x1 = &xd[(r + 1) * in_dim..(r + 2) * in_dim];
        for o in 0..out_dim {
            let wr = &wd[o * in_dim..(o + 1) * in_dim];
            let (a, b) = dot2(x0, x1, wr);
            out[r * out_dim + o] = a;
            out[(r + 1) * out_dim + o] = b;
        }
        r += 2;
    }
    if r < rows {
        let xr = &xd[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            out[r * out_dim + o] = dot(xr, &wd[o * in_dim..(o + 1) * in_dim]);
        }
    }
    if let Some(b) = b {
        for orow in out.chunks_exact_mut(out_dim) {
            for (slot, &bv) in orow.iter_mut().zip(b.data()) {
                *slot += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_dim;
    Tensor::new(shape, out)
}

/// Elementwise binary op with numpy broadcasting.
pub fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = Vec::with_capacity(numel(&out_shape));
    for_each_broadcast(&out_shape, &sa, &sb, |oa, ob| out.push(f(a.data()[oa], b.data()[ob])));
    Tensor::new(out_shape, out)
}

/// Visit every output index in row-major order, yielding the matching offsets
/// into the two broadcast operands.
pub(crate) fn for_each_broadcast(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let last = shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let outer = total / last;
    for _ in 0..outer {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for j in 0..last {
            f(base_a + j * la, base_b + j * lb);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Sum a gradient of broadcast shape `from` back down to `to`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, to: &[usize]) -> Tensor<T> {
    if grad.shape() == to {
        return grad.clone();
    }
    let st = broadcast_strides(to, grad.shape());
    let zeros = vec![0; grad.rank()];
    let mut out = Tensor::zeros(to);
    let mut gi = 0;
    let data = out.data_mut();
    for_each_broadcast(grad.shape(), &st, &zeros, |ot, _| {
        data[ot] += grad.data()[gi];
        gi += 1;
    });
    out
}

/// Per-row statistics kept by [`layer_norm_stats`] for the backward pass.
pub struct LayerNormStats<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(layer_norm_stats(x, gamma, beta, eps)?.0)
}

/// LayerNorm over the last axis, also returning the normalized input and
/// reciprocal standard deviations.
pub fn layer_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let d = x.last_dim();
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let rows = x.numel() / d;
    let inv_d = lit::<T>(1.0 / d as f64);
    let eps = lit::<T>(eps);
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        LayerNormStats {
            normalized: Tensor::new(shape, xhat)?,
            inv_std,
        },
    ))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::config(format!("softmax temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

/// Softmax of `x / temperature` over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let k = x.last_dim();
    if k == 0 {
        return Err(Error::dim("softmax", x.shape(), &[1]));
    }
    let inv_t = lit::<T>(1.0 / temperature);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_t).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Log-softmax of `x / temperature` over the last axis, via max subtraction.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let k = x.last_dim();
    if k == 0 {
        return Err(Error::dim("log_softmax", x.shape(), &[1]));
    }
    let inv_t = lit::<T>(1.0 / temperature);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        for v in row.iter_mut() {
            *v = (*v - max) * inv_t;
        }
        let lse = row.iter().map(|v| v.exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Cosine similarity over the last axis, with each norm floored at `eps`.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::dim("cosine_similarity", a.shape(), b.shape()));
    }
    let d = a.last_dim();
    let eps = lit::<T>(eps);
    let data = a
        .data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(x, y)| {
            let na = dot(x, x).sqrt().max(eps);
            let nb = dot(y, y).sqrt().max(eps);
            dot(x, y) / (na * nb)
        })
        .collect();
    Tensor::new(a.shape()[..a.rank() - 1].to_vec(), data)
}

/// `KL(p || q)` over the last axis for probability vectors.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    if p.shape() != q.shape() || p.rank() == 0 {
        return Err(Error::dim("kl_divergence", p.shape(), q.shape()));
    }
    let k = p.last_dim();
    for (name, t) in [("p", p), ("q", q)] {
        for row in t.data().chunks_exact(k) {
            let s = row.iter().copied().sum::<T>().as_f64();
            if (s - 1.0).abs() > PROBABILITY_TOL || row.iter().any(|v| *v < T::zero()) {
                return Err(Error::contract(format!("{name} is not a probability vector (sum {s})")));
            }
        }
    }
    let log_p = p.map(|v| v.ln());
    let log_q = q.map(|v| v.ln());
    let data = p
        .data()
        .chunks_exact(k)
        .zip(log_p.data().chunks_exact(k).zip(log_q.data().chunks_exact(k)))
        .map(|(pr, (lp, lq))| {
            pr.iter()
                .zip(lp.iter().zip(lq))
                .filter(|(pi, _)| **pi > T::zero())
                .map(|(&pi, (&a, &b))| pi * (a - b))
                .sum()
        })
        .collect();
    Tensor::new(p.shape()[..p.rank() - 1].to_vec(), data)
}

/// `KL(softmax(p) || softmax(q))` over the last axis, from logits.
/// Returns the divergences and both log-probability tensors.
pub fn kl_div_logits<T: Scalar>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if p_logits.shape() != q_logits.shape() || p_logits.rank() == 0 {
        return Err(Error::dim("kl_div_logits", p_logits.shape(), q_logits.shape()));
    }
    let lp = log_softmax(p_logits, 1.0)?;
    let lq = log_softmax(q_logits, 1.0)?;
    let k = p_logits.last_dim();
    let data = lp
        .data()
        .chunks_exact(k)
        .zip(lq.data().chunks_exact(k))
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x.exp() * (x - y)).sum())
        .collect();
    let kl = Tensor::new(p_logits.shape()[..p_logits.rank() - 1].to_vec(), data)?;
    Ok((kl, lp, lq))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    // exp is several times cheaper than tanh in libm; saturates cleanly to +-1
    let two = lit::<T>(2.0);
    two / (T::one() + (-two * u).exp()) - T::one()
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let t = fast_tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", x.shape(), axes));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; rank];
    let mut out = Vec::with_capacity(x.numel());
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, _| out.push(x.data()[o]));
    Tensor::new(out_shape, out)
}

/// Inverse of a permutation.
pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `x[..., start..end, ...]` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start > end || end > x.shape()[axis] {
        return Err(Error::dim("slice", x.shape(), &[axis, start, end]));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let len = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Tensor::new(shape, out)
}

/// Join tensors along an existing axis.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::dim("concat", first.shape(), &[axis]));
    }
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::dim("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Stack equally shaped tensors along a new trailing axis.
pub fn stack_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::dim("stack_last", first.shape(), p.shape()));
        }
    }
    let m = parts.len();
    let mut out = vec![T::zero(); first.numel() * m];
    for (j, p) in parts.iter().enumerate() {
        for (i, &v) in p.data().iter().enumerate() {
            out[i * m + j] = v;
        }
    }
    let mut shape = first.shape().to_vec();
    shape.push(m);
    Tensor::new(shape, out)
}
