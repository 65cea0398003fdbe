//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the vector-Jacobian product. Leaves may borrow their tensors
//! (parameters are not copied). An inference tape records no backward state.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, AttnDims, GnStats};
use super::tensor::{gemm, MatView, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GnStats },
    Silu(Var),
    Softmax { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    ToTokens(Var),
    FromTokens(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Upsample(Var),
    SpaceToDepth(Var),
    DepthToSpace(Var),
    Repeat0(Var),
    SelectRows { x: Var, alt: Var, mask: Vec<bool> },
    Reshape(Var),
    Mse(Var, Var),
    Sum(Var),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    record: bool,
    attention_macs: u64,
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape that records backward state.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            attention_macs: 0,
        }
    }

    /// A tape for forward-only evaluation.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates spent inside attention since the tape was created.
    pub fn attention_macs(&self) -> u64 {
        self.attention_macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let grad = parents.iter().any(|p| self.nodes[p.0].grad);
        let op = if grad { op } else { Op::Leaf };
        self.push(Cow::Owned(value), op, grad)
    }

    /// Trainable leaf borrowing its tensor.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf owning its tensor.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn input_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.out(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.out(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.out(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.out(v, Op::Scale(a, s), &[a])
    }

    /// `x[b, c, ...] + v[b, c]` broadcast over trailing axes.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.len() < 2 || vs.len() != 2 || xs[0] != vs[0] || xs[1] != vs[1] {
            return Err(shape_err("add_channel", xs, vs));
        }
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let add = vd[i];
            for e in chunk {
                *e += add;
            }
        }
        Ok(self.out(out, Op::AddChannel(x, v), &[x, v]))
    }

    /// `x[..., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err("linear", &ws, &xs));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(shape_err("linear bias", &[n], self.shape(b)));
            }
        }
        let rows = self.value(x).len() / k;
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        let beta = if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(n) {
                row.copy_from_slice(&bd);
            }
            T::one()
        } else {
            T::zero()
        };
        gemm(rows, k, n, T::one(), self.value(x).data(), MatView::rows(0, k), self.value(w).data(), MatView::rows(0, n), beta, out.data_mut(), MatView::rows(0, n));
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.out(out, Op::Linear { x, w, b }, &parents))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.out(out, Op::Conv { x, w, b, stride, pad }, &parents))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, stats) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.out(out, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.out(out, Op::Silu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.out(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Grouped scaled dot-product attention over `[groups, L, width]` views
    /// of `q`, `k`, `v`. The output keeps `q`'s leading shape.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize) -> Result<Var> {
        let dims = kernels::attention_dims(self.value(q), self.value(k), self.value(v), groups)?;
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), dims);
        self.attention_macs += dims.macs();
        let mut shape = self.shape(q).to_vec();
        *shape.last_mut().unwrap() = dims.dv;
        let out = Tensor::new(&shape, out)?;
        let grad = [q, k, v].iter().any(|p| self.nodes[p.0].grad);
        let probs = if grad && self.record { probs } else { Vec::new() };
        Ok(self.out(out, Op::Attention { q, k, v, dims, probs }, &[q, k, v]))
    }

    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(invalid("to_tokens", "expected [B,C,H,W]"));
        }
        let out = kernels::to_tokens(self.value(x));
        Ok(self.out(out, Op::ToTokens(x), &[x]))
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] != h * w {
            return Err(invalid("from_tokens", "expected [B,H*W,C]"));
        }
        let out = kernels::from_tokens(self.value(x), h, w);
        Ok(self.out(out, Op::FromTokens(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(crate::Error::Empty { op: "concat" })?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let a = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.out(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample2x(self.value(x));
        self.out(out, Op::Upsample(x), &[x])
    }

    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let out = kernels::space_to_depth(self.value(x))?;
        Ok(self.out(out, Op::SpaceToDepth(x), &[x]))
    }

    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let out = kernels::depth_to_space(self.value(x))?;
        Ok(self.out(out, Op::DepthToSpace(x), &[x]))
    }

    /// Tiles a `[1, ...]` value `n` times along the leading axis.
    pub fn repeat0(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first() != Some(&1) || n == 0 {
            return Err(invalid("repeat0", "expected leading axis of size 1"));
        }
        let mut shape = s.clone();
        shape[0] = n;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.out(out, Op::Repeat0(x), &[x]))
    }

    /// Replaces sample `b` of `x` with `alt` wherever `mask[b]` is set.
    pub fn select_rows(&mut self, x: Var, alt: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs[0] != mask.len() || self.value(alt).len() * xs[0] != self.value(x).len() {
            return Err(shape_err("select_rows", &xs, self.shape(alt)));
        }
        let inner = self.value(alt).len();
        let mut out = self.value(x).clone();
        let alt_data = self.value(alt).data().to_vec();
        for (b, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[b * inner..(b + 1) * inner].copy_from_slice(&alt_data);
            }
        }
        Ok(self.out(out, Op::SelectRows { x, alt, mask: mask.to_vec() }, &[x, alt]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.out(out, Op::Reshape(x), &[x]))
    }

    /// Mean squared error, a scalar `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        Ok(self.out(Tensor::scalar(T::of(s / n)), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.out(Tensor::scalar(T::of(s)), Op::Sum(x), &[x])
    }

    /// Back-propagates from a scalar `loss`. Each node's gradient is complete
    /// before it is consumed, so every leaf receives its gradient exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, t: Tensor<T>| {
                if self.nodes[v.0].grad {
                    accumulate(&mut grads[v.0], t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * *s)),
                Op::AddChannel(x, v) => {
                    let vs = self.shape(*v).to_vec();
                    let inner = g.len() / (vs[0] * vs[1]);
                    let gv = Tensor::from_fn(&vs, |i| {
                        let mut acc = T::zero();
                        for &e in &g.data()[i * inner..(i + 1) * inner] {
                            acc += e;
                        }
                        acc
                    });
                    send(*v, gv);
                    send(*x, g);
                }
                Op::Linear { x, w, b } => {
                    let ws = self.shape(*w);
                    let (k, n) = (ws[0], ws[1]);
                    let rows = g.len() / n;
                    if self.nodes[x.0].grad {
                        let mut dx = Tensor::zeros(self.shape(*x));
                        gemm(rows, n, k, T::one(), g.data(), MatView::rows(0, n), self.value(*w).data(), MatView::transposed(0, n), T::zero(), dx.data_mut(), MatView::rows(0, k));
                        send(*x, dx);
                    }
                    if self.nodes[w.0].grad {
                        let mut dw = Tensor::zeros(ws);
                        gemm(k, rows, n, T::one(), self.value(*x).data(), MatView::transposed(0, k), g.data(), MatView::rows(0, n), T::zero(), dw.data_mut(), MatView::rows(0, n));
                        send(*w, dw);
                    }
                    if let Some(b) = b {
                        let mut db = Tensor::zeros(&[n]);
                        for row in g.data().chunks(n) {
                            for (d, &r) in db.data_mut().iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad)?;
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (dx, dg, db) = kernels::group_norm_backward(self.value(*x), self.value(*gamma), stats, &g, *groups)?;
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, d| {
                        let s = T::one() / (T::one() + (-v).exp());
                        d * s * (T::one() + v * (T::one() - s))
                    })?;
                    send(*x, dx);
                }
                Op::Softmax { x, axis } => {
                    let dx = kernels::softmax_backward(&node.value, &g, *axis);
                    send(*x, dx);
                }
                Op::Attention { q, k, v, dims, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, g.data(), *dims);
                    send(*q, Tensor::new(self.shape(*q), dq)?);
                    send(*k, Tensor::new(self.shape(*k), dk)?);
                    send(*v, Tensor::new(self.shape(*v), dv)?);
                }
                Op::ToTokens(x) => {
                    let s = self.shape(*x);
                    send(*x, kernels::from_tokens(&g, s[2], s[3]));
                }
                Op::FromTokens(x) => send(*x, kernels::to_tokens(&g)),
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let a = self.shape(p)[*axis];
                        if self.nodes[p.0].grad {
                            let mut data = Vec::with_capacity(outer * a * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                data.extend_from_slice(&g.data()[start..start + a * inner]);
                            }
                            send(p, Tensor::new(self.shape(p), data)?);
                        }
                        offset += a;
                    }
                }
                Op::Upsample(x) => send(*x, kernels::upsample2x_backward(&g)),
                Op::SpaceToDepth(x) => send(*x, kernels::depth_to_space(&g)?),
                Op::DepthToSpace(x) => send(*x, kernels::space_to_depth(&g)?),
                Op::Repeat0(x) => {
                    let inner = self.value(*x).len();
                    let mut acc = Tensor::zeros(self.shape(*x));
                    for chunk in g.data().chunks(inner) {
                        for (a, &c) in acc.data_mut().iter_mut().zip(chunk) {
                            *a += c;
                        }
                    }
                    send(*x, acc);
                }
                Op::SelectRows { x, alt, mask } => {
                    let inner = self.value(*alt).len();
                    let mut galt = Tensor::zeros(self.shape(*alt));
                    let mut gx = g.clone();
                    for (b, &m) in mask.iter().enumerate() {
                        if m {
                            let seg = &mut gx.data_mut()[b * inner..(b + 1) * inner];
                            for (a, s) in galt.data_mut().iter_mut().zip(seg.iter_mut()) {
                                *a += *s;
                                *s = T::zero();
                            }
                        }
                    }
                    send(*x, gx);
                    send(*alt, galt);
                }
                Op::Reshape(x) => {
                    let s = self.shape(*x).to_vec();
                    send(*x, g.reshape(&s)?);
                }
                Op::Mse(a, b) => {
                    let n = self.value(*a).len() as f64;
                    let c = g.data()[0] * T::of(2.0 / n);
                    let ga = self.value(*a).zip_map(self.value(*b), |x, y| c * (x - y))?;
                    send(*b, ga.map(|v| -v));
                    send(*a, ga);
                }
                Op::Sum(x) => {
                    let c = g.data()[0];
                    send(*x, Tensor::full(self.shape(*x), c));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
