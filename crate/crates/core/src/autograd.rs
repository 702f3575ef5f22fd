//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the rule for
//! pulling gradients back to its inputs. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! A node only records a backward rule when at least one input requires a
//! gradient; everything downstream of constants alone stays a constant.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, axpy, dot, MatmulPlan};
use crate::tensor::{lit, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Tensor<T>, inv_std: Vec<T> },
    Softmax { x: Var, temperature: f64 },
    Gelu { x: Var },
    KlLogits { p: Var, q: Var, log_p: Tensor<T>, log_q: Tensor<T> },
    Cosine { a: Var, b: Var, eps: f64 },
    Sum { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    StackLast { parts: Vec<Var> },
    Square { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules; parameters enter as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Named trainable parameters registered on this tape, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Register a trainable leaf. On a no-grad tape this is a constant.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        let var = self.leaf(value.clone(), requires_grad);
        if requires_grad {
            self.params.push((name.into(), var));
        }
        var
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { stage: name.to_string() });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, &inputs, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", value, &[a, b], Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = lit::<T>(c);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, &[x], Op::Scale { x, c })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = ops::permute(self.value(x), axes)?;
        self.push("permute", value, &[x], Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, stats) = ops::layer_norm_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized: stats.normalized,
                inv_std: stats.inv_std,
            },
        )
    }

    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = ops::softmax(self.value(x), temperature)?;
        self.push("softmax", value, &[x], Op::Softmax { x, temperature })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = ops::gelu(self.value(x));
        self.push("gelu", value, &[x], Op::Gelu { x })
    }

    /// Row-wise `KL(softmax(p) || softmax(q))` from logits over the last axis.
    pub fn kl_div_logits(&mut self, p: Var, q: Var) -> Result<Var> {
        let (value, log_p, log_q) = ops::kl_div_logits(self.value(p), self.value(q))?;
        self.push("kl_div_logits", value, &[p, q], Op::KlLogits { p, q, log_p, log_q })
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let value = ops::cosine_similarity(self.value(a), self.value(b), eps)?;
        self.push("cosine_similarity", value, &[a, b], Op::Cosine { a, b, eps })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = ops::slice(self.value(x), axis, start, end)?;
        self.push("slice", value, &[x], Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat(&tensors, axis)?;
        self.push("concat", value, parts, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ops::stack_last(&tensors)?;
        self.push("stack_last", value, parts, Op::StackLast { parts: parts.to_vec() })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", value, &[x], Op::Square { x })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn pull_back(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / in_dim;
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..rows {
                        let gr = &g.data()[r * out_dim..(r + 1) * out_dim];
                        let dst = &mut gx.data_mut()[r * in_dim..(r + 1) * in_dim];
                        for (o, &go) in gr.iter().enumerate() {
                            if go != T::zero() {
                                axpy(go, &wv.data()[o * in_dim..(o + 1) * in_dim], dst);
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    for r in 0..rows {
                        let xr = &xv.data()[r * in_dim..(r + 1) * in_dim];
                        let gr = &g.data()[r * out_dim..(r + 1) * out_dim];
                        for (o, &go) in gr.iter().enumerate() {
                            if go != T::zero() {
                                axpy(go, xr, &mut gw.data_mut()[o * in_dim..(o + 1) * in_dim]);
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut gb = Tensor::zeros(&[out_dim]);
                        for gr in g.data().chunks_exact(out_dim) {
                            for (d, &v) in gb.data_mut().iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let plan = MatmulPlan::new(av.shape(), bv.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let need_a = self.requires_grad(*a);
                let need_b = self.requires_grad(*b);
                let mut ga = if need_a { Some(Tensor::zeros(av.shape())) } else { None };
                let mut gb = if need_b { Some(Tensor::zeros(bv.shape())) } else { None };
                for (bi, (ao, bo)) in plan.offsets().into_iter().enumerate() {
                    let gc = &g.data()[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        let bm = &bv.data()[bo..bo + k * n];
                        let dst = &mut ga.data_mut()[ao..ao + m * k];
                        for i in 0..m {
                            for p in 0..k {
                                dst[i * k + p] += dot(&gc[i * n..(i + 1) * n], &bm[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let am = &av.data()[ao..ao + m * k];
                        let dst = &mut gb.data_mut()[bo..bo + k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = am[i * k + p];
                                if aip != T::zero() {
                                    axpy(aip, &gc[i * n..(i + 1) * n], &mut dst[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::reduce_to_shape(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let mut gb = ops::reduce_to_shape(g, self.shape(*b));
                    if negate {
                        gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let full = ops::zip_broadcast("mul", g, self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, ops::reduce_to_shape(&full, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let full = ops::zip_broadcast("mul", g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, ops::reduce_to_shape(&full, self.shape(*b)));
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Permute { x, axes } => {
                self.accumulate(grads, *x, ops::permute(g, &ops::inverse_axes(axes))?);
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let gam = self.value(*gamma);
                let d = gam.numel();
                let dn = lit::<T>(d as f64);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = Tensor::zeros(&[d]);
                    let mut gbeta = Tensor::zeros(&[d]);
                    for (gr, hr) in g.data().chunks_exact(d).zip(normalized.data().chunks_exact(d)) {
                        for j in 0..d {
                            gg.data_mut()[j] += gr[j] * hr[j];
                            gbeta.data_mut()[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gbeta);
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let mut gh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.data().chunks_exact(d).zip(normalized.data().chunks_exact(d)).enumerate() {
                        let mut sum_gh = T::zero();
                        let mut sum_ghh = T::zero();
                        for j in 0..d {
                            gh[j] = gr[j] * gam.data()[j];
                            sum_gh += gh[j];
                            sum_ghh += gh[j] * hr[j];
                        }
                        let scale = inv_std[r] / dn;
                        let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] = scale * (dn * gh[j] - sum_gh - hr[j] * sum_ghh);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let k = y.last_dim();
                let inv_t = lit::<T>(1.0 / temperature);
                let mut gx = Tensor::zeros(y.shape());
                for ((dst, yr), gr) in gx
                    .data_mut()
                    .chunks_exact_mut(k)
                    .zip(y.data().chunks_exact(k))
                    .zip(g.data().chunks_exact(k))
                {
                    let inner = dot(gr, yr);
                    for j in 0..k {
                        dst[j] = yr[j] * (gr[j] - inner) * inv_t;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(&v, &gv)| gv * ops::gelu_grad(v)).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::KlLogits { p, q, log_p, log_q } => {
                let k = log_p.last_dim();
                let kl = &node.value;
                if self.requires_grad(*p) {
                    let mut gp = Tensor::zeros(log_p.shape());
                    for (r, dst) in gp.data_mut().chunks_exact_mut(k).enumerate() {
                        let (lp, lq) = (&log_p.data()[r * k..(r + 1) * k], &log_q.data()[r * k..(r + 1) * k]);
                        let (gr, klr) = (g.data()[r], kl.data()[r]);
                        for j in 0..k {
                            dst[j] = gr * lp[j].exp() * (lp[j] - lq[j] - klr);
                        }
                    }
                    self.accumulate(grads, *p, gp);
                }
                if self.requires_grad(*q) {
                    let mut gq = Tensor::zeros(log_q.shape());
                    for (r, dst) in gq.data_mut().chunks_exact_mut(k).enumerate() {
                        let (lp, lq) = (&log_p.data()[r * k..(r + 1) * k], &log_q.data()[r * k..(r + 1) * k]);
                        let gr = g.data()[r];
                        for j in 0..k {
                            dst[j] = gr * (lq[j].exp() - lp[j].exp());
                        }
                    }
                    self.accumulate(grads, *q, gq);
                }
            }
            Op::Cosine { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.last_dim();
                let eps = lit::<T>(*eps);
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for r in 0..av.numel() / d {
                    let x = &av.data()[r * d..(r + 1) * d];
                    let y = &bv.data()[r * d..(r + 1) * d];
                    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
                    let (dx, dy) = (nx.max(eps), ny.max(eps));
                    let cos = dot(x, y) / (dx * dy);
                    let gr = g.data()[r];
                    // the clamped norm is constant below eps
                    let kx = if nx > eps { cos / (nx * nx) } else { T::zero() };
                    let ky = if ny > eps { cos / (ny * ny) } else { T::zero() };
                    let inv = T::one() / (dx * dy);
                    for j in 0..d {
                        ga.data_mut()[r * d + j] = gr * (y[j] * inv - kx * x[j]);
                        gb.data_mut()[r * d + j] = gr * (x[j] * inv - ky * y[j]);
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.item()));
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let (len, taken) = (shape[*axis], g.shape()[*axis]);
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gx.data_mut()[dst..dst + taken * inner]
                        .copy_from_slice(&g.data()[o * taken * inner..(o + 1) * taken * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, ops::slice(g, *axis, start, start + len)?);
                    }
                    start += len;
                }
            }
            Op::StackLast { parts } => {
                let m = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if self.requires_grad(p) {
                        let data = g.data().iter().skip(j).step_by(m).copied().collect();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?);
                    }
                }
            }
            Op::Square { x } => {
                let xv = self.value(*x);
                let two = lit::<T>(2.0);
                let data = xv.data().iter().zip(g.data()).map(|(&v, &gv)| two * v * gv).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

/// Gradients of one backward sweep, retained for leaf nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape when nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Gradients for every named parameter on the tape. A name registered
    /// more than once gets the sum over its uses.
    pub fn named(&self, tape: &Tape<T>) -> HashMap<String, Tensor<T>> {
        let mut out: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, var) in tape.params() {
            let g = self.get_or_zeros(tape, *var);
            match out.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_squared_norm_gives_x() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let x = tape.param("x", &xv);
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("used", &Tensor::ones(&[2]));
        let _ = tape.param("unused", &Tensor::ones(&[3]));
        let s = tape.sum(x).unwrap();
        let named = tape.backward(s).unwrap().named(&tape);
        assert_eq!(named["unused"], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", &Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        assert!(Tape::<f32>::new().backward(Var(0)).is_err());
    }

    #[test]
    fn no_grad_tape_records_constants() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.param("x", &Tensor::ones(&[2]));
        let y = tape.square(x).unwrap();
        assert!(!tape.requires_grad(y));
        assert!(tape.params().is_empty());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2], f32::MAX));
        let err = tape.square(x).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
