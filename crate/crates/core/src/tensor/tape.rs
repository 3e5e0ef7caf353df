use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, axis_split, Gemm, Layout};
use super::{numel, Real, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Batch-normalization statistics carried between training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(0.1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BroadcastAdd(usize, usize),
    Scale(usize, T),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    MatMul {
        a: usize,
        b: usize,
        shared_rhs: bool,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    Nll {
        logp: usize,
        targets: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BroadcastAdd(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _) | Op::Reshape(a) | Op::Permute(a, _) | Op::Gelu(a) => vec![*a],
            Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Nll { logp, .. } => vec![*logp],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are created after their
/// inputs, so creation order is a topological order.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var<'_, T>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = vars
                .first()
                .ok_or_else(|| invalid!("concat of zero tensors"))?;
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
            }
            let mut total = 0;
            for v in vars {
                let s = nodes[v.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(shape_err!("concat along {axis}: {base:?} vs {s:?}"));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for v in vars {
                    let t = &nodes[v.id].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&shape, data)?
        };
        self.push(
            value,
            Op::Concat {
                inputs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
            "concat",
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].requires_grad).map(|data| Tensor {
                    shape: nodes[id].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    contribution: Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
        }
        Op::BroadcastAdd(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            if needs(*b) {
                let n = val(*b).len();
                let mut gb = vec![T::zero(); n];
                for chunk in g.chunks(n) {
                    for (acc, &v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|&v| v * *s).collect()),
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Permute(a, perm) => {
            let (back, _) = kernels::permute(g, node.value.shape(), &kernels::invert_perm(perm));
            accumulate(nodes, grads, *a, back);
        }
        Op::MatMul { a, b, shared_rhs } => {
            let (at, bt) = (val(*a), val(*b));
            let k = at.shape()[at.ndim() - 1];
            let m = at.shape()[at.ndim() - 2];
            let n = bt.shape()[bt.ndim() - 1];
            let batch = at.len() / (m * k);
            if needs(*a) {
                // dA = dC · Bᵀ
                let mut ga = vec![T::zero(); at.len()];
                let gemm = if *shared_rhs {
                    Gemm { layout: Layout::NT, batch: 1, rows: batch * m, depth: n, cols: k, b_stride: 0 }
                } else {
                    Gemm { layout: Layout::NT, batch, rows: m, depth: n, cols: k, b_stride: k * n }
                };
                gemm.run(g, bt.data(), &mut ga);
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                let mut gb = vec![T::zero(); bt.len()];
                if *shared_rhs {
                    Gemm { layout: Layout::TN, batch: 1, rows: k, depth: batch * m, cols: n, b_stride: 0 }
                        .run(at.data(), g, &mut gb);
                } else {
                    // The TN kernel strides A by rows*depth = k*m and B by b_stride.
                    Gemm { layout: Layout::TN, batch, rows: k, depth: m, cols: n, b_stride: m * n }
                        .run(at.data(), g, &mut gb);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, size, inner) = axis_split(node.value.shape(), *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * size * inner + a * inner + i;
                    let dot: T = (0..size).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..size {
                        gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LogSoftmax { x, axis } => {
            let y = node.value.data();
            let (outer, size, inner) = axis_split(node.value.shape(), *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * size * inner + a * inner + i;
                    let total: T = (0..size).map(|a| g[at(a)]).sum();
                    for a in 0..size {
                        gx[at(a)] = g[at(a)] - y[at(a)].exp() * total;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma).data();
            let d = gam.len();
            let mut gg = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let mut gx = vec![T::zero(); xhat.len()];
            let inv_d = T::lit(1.0 / d as f64);
            for (r, &rs) in rstd.iter().enumerate() {
                let row = r * d..(r + 1) * d;
                let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for j in 0..d {
                    gg[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                    let dxh = gr[j] * gam[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xr[j];
                }
                mean_dxhat *= inv_d;
                mean_dxhat_xhat *= inv_d;
                for j in 0..d {
                    gx[row.start + j] = rs * (gr[j] * gam[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
                }
            }
            if needs(*x) {
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *gamma, gg);
            accumulate(nodes, grads, *beta, gbeta);
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
            let gam = val(*gamma).data();
            let c = gam.len();
            let count = xhat.len() / c;
            let mut gg = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                gg[i % c] += gv * xh;
                gbeta[i % c] += gv;
            }
            if needs(*x) {
                let mut gx = vec![T::zero(); xhat.len()];
                if *batch_stats {
                    // Same reduction as layer norm, over the batch for each channel.
                    let inv_m = T::lit(1.0 / count as f64);
                    for (i, out) in gx.iter_mut().enumerate() {
                        let ch = i % c;
                        let mean_dxhat = gbeta[ch] * gam[ch] * inv_m;
                        let mean_dxhat_xhat = gg[ch] * gam[ch] * inv_m;
                        *out = rstd[ch] * (g[i] * gam[ch] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                } else {
                    for (i, out) in gx.iter_mut().enumerate() {
                        let ch = i % c;
                        *out = g[i] * gam[ch] * rstd[ch];
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *gamma, gg);
            accumulate(nodes, grads, *beta, gbeta);
        }
        Op::Gelu(a) => {
            let xs = val(*a).data();
            let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt2pi = T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
            let half = T::lit(0.5);
            let gx = g
                .iter()
                .zip(xs)
                .map(|(&gv, &x)| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt2pi * (-half * x * x).exp();
                    gv * (cdf + x * pdf)
                })
                .collect();
            accumulate(nodes, grads, *a, gx);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![g[0] / T::lit(n as f64); n]);
        }
        Op::Nll { logp, targets } => {
            let lp = val(*logp);
            let classes = lp.shape()[lp.ndim() - 1];
            let mut gx = vec![T::zero(); lp.len()];
            let w = -g[0] / T::lit(targets.len() as f64);
            for (r, &t) in targets.iter().enumerate() {
                gx[r * classes + t] = w;
            }
            accumulate(nodes, grads, *logp, gx);
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, _, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            let total = shape[*axis] * inner;
            for &id in inputs {
                let part = val(id).shape()[*axis] * inner;
                if needs(id) {
                    let mut gx = Vec::with_capacity(outer * part);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gx.extend_from_slice(&g[base..base + part]);
                    }
                    accumulate(nodes, grads, id, gx);
                }
                offset += part;
            }
        }
        Op::Slice { x, axis, start } => {
            let src = val(*x).shape();
            let (outer, size, inner) = axis_split(src, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![T::zero(); val(*x).len()];
            for o in 0..outer {
                let dst = o * size * inner + start * inner;
                let from = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[from..from + len * inner]);
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of this node's value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn zip_same(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err!("{name}: {:?} vs {:?}", a.shape(), b.shape()));
            }
            Tensor {
                shape: a.shape().to_vec(),
                data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        self.tape.push(value, op, name)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_same(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_same(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_same(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds `other` repeated over the leading axes of `self`; `other`'s
    /// shape must equal a trailing suffix of `self`'s.
    pub fn broadcast_add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || b.is_empty() {
                return Err(shape_err!("broadcast_add: {sb:?} is not a suffix of {sa:?}"));
            }
            let n = b.len();
            let data = a
                .data()
                .chunks(n)
                .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| x + y))
                .collect();
            Tensor { shape: sa.to_vec(), data }
        };
        self.tape.push(value, Op::BroadcastAdd(self.id, other.id), "broadcast_add")
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, T>> {
        let s = T::lit(s);
        let value = self.value().map(|v| v * s);
        self.tape.push(value, Op::Scale(self.id, s), "scale")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        self.tape.push(value, Op::Reshape(self.id), "reshape")
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().permute(perm)?;
        self.tape.push(value, Op::Permute(self.id, perm.to_vec()), "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let n = self.value().ndim();
        if n < 2 {
            return Err(shape_err!("transpose needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    /// `[.., m, k] · [k, n]` (shared right operand) or
    /// `[.., m, k] · [.., k, n]` with identical leading axes.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, shared_rhs) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(shape_err!("matmul needs matrices, got {sa:?} and {sb:?}"));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let shared = sb.len() == 2;
            if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
                return Err(shape_err!("matmul: {sa:?} · {sb:?}"));
            }
            let batch = a.len() / (m * k).max(1);
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            let mut data = vec![T::zero(); numel(&out_shape)];
            if k > 0 {
                Gemm {
                    layout: Layout::NN,
                    batch,
                    rows: m,
                    depth: k,
                    cols: n,
                    b_stride: if shared { 0 } else { k * n },
                }
                .run(a.data(), b.data(), &mut data);
            }
            (Tensor { shape: out_shape, data }, shared)
        };
        self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                shared_rhs,
            },
            "matmul",
        )
    }

    /// `self · w + b` over the last axis.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => {
                let (wn, bs) = (w.value().shape()[1], b.shape());
                if bs != [wn] {
                    return Err(shape_err!("linear bias {bs:?} does not match output width {wn}"));
                }
                y.broadcast_add(b)
            }
            None => Ok(y),
        }
    }

    fn check_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for {shape:?}"));
        }
        Ok(shape)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis)?;
        let value = {
            let x = self.value();
            let (outer, size, inner) = axis_split(&shape, axis);
            let mut out = vec![T::zero(); x.len()];
            let xs = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * size * inner + a * inner + i;
                    let max = (0..size).map(|a| xs[at(a)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for a in 0..size {
                        let e = (xs[at(a)] - max).exp();
                        out[at(a)] = e;
                        total += e;
                    }
                    for a in 0..size {
                        out[at(a)] /= total;
                    }
                }
            }
            Tensor { shape, data: out }
        };
        self.tape.push(value, Op::Softmax { x: self.id, axis }, "softmax")
    }

    /// `x - max - ln Σ exp(x - max)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis)?;
        let value = {
            let x = self.value();
            let (outer, size, inner) = axis_split(&shape, axis);
            let mut out = vec![T::zero(); x.len()];
            let xs = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * size * inner + a * inner + i;
                    let max = (0..size).map(|a| xs[at(a)]).fold(T::neg_infinity(), T::max);
                    let lse = (0..size).map(|a| (xs[at(a)] - max).exp()).sum::<T>().ln();
                    for a in 0..size {
                        out[at(a)] = xs[at(a)] - max - lse;
                    }
                }
            }
            Tensor { shape, data: out }
        };
        self.tape.push(value, Op::LogSoftmax { x: self.id, axis }, "log_softmax")
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (value, xhat, rstd) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let d = *x.shape().last().ok_or_else(|| shape_err!("layer_norm of a scalar"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(shape_err!(
                    "layer_norm over {d} features with gamma {:?}, beta {:?}",
                    g.shape(),
                    b.shape()
                ));
            }
            let eps = T::lit(eps);
            let inv_d = T::lit(1.0 / d as f64);
            let rows = x.len() / d;
            let mut xhat = vec![T::zero(); x.len()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = (var + eps).sqrt().recip();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g.data()[j] + b.data()[j];
                }
            }
            (Tensor { shape: x.shape().to_vec(), data: out }, xhat, rstd)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Per-channel normalization with channels on the last axis and
    /// statistics over every other axis. In [`NormMode::Train`] the running
    /// estimates are updated (unbiased variance) with their momentum.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: &mut RunningStats<T>,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let (value, xhat, rstd) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let c = *x.shape().last().ok_or_else(|| shape_err!("batch_norm of a scalar"))?;
            if g.shape() != [c] || b.shape() != [c] || stats.mean.len() != c || stats.var.len() != c
            {
                return Err(shape_err!(
                    "batch_norm over {c} channels with gamma {:?}, beta {:?}, {} running stats",
                    g.shape(),
                    b.shape(),
                    stats.mean.len()
                ));
            }
            let count = x.len() / c;
            let eps = T::lit(eps);
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mut mean = vec![T::zero(); c];
                    let mut var = vec![T::zero(); c];
                    for (i, &v) in x.data().iter().enumerate() {
                        mean[i % c] += v;
                    }
                    let inv = T::lit(1.0 / count as f64);
                    mean.iter_mut().for_each(|m| *m *= inv);
                    for (i, &v) in x.data().iter().enumerate() {
                        let d = v - mean[i % c];
                        var[i % c] += d * d;
                    }
                    var.iter_mut().for_each(|s| *s *= inv);
                    let mom = stats.momentum;
                    let unbias = if count > 1 {
                        T::lit(count as f64 / (count - 1) as f64)
                    } else {
                        T::one()
                    };
                    for ch in 0..c {
                        stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                        stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
                    }
                    (mean, var)
                }
                NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
            };
            let rstd: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
            let mut xhat = vec![T::zero(); x.len()];
            let mut out = vec![T::zero(); x.len()];
            for (i, &v) in x.data().iter().enumerate() {
                let ch = i % c;
                let xh = (v - mean[ch]) * rstd[ch];
                xhat[i] = xh;
                out[i] = xh * g.data()[ch] + b.data()[ch];
            }
            (Tensor { shape: x.shape().to_vec(), data: out }, xhat, rstd)
        };
        self.tape.push(
            value,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
                batch_stats: mode == NormMode::Train,
            },
            "batch_norm",
        )
    }

    /// `x · Φ(x)` with the exact normal CDF.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::lit(0.5);
        let value = self
            .value()
            .map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()));
        self.tape.push(value, Op::Gelu(self.id), "gelu")
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let value = Tensor::scalar(self.value().data().iter().copied().sum());
        self.tape.push(value, Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if x.is_empty() {
                return Err(invalid!("mean of an empty tensor"));
            }
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64))
        };
        self.tape.push(value, Op::Mean(self.id), "mean")
    }

    /// Mean of `-self[r, targets[r]]` over rows, where classes are the last
    /// axis. `self` is expected to hold log-probabilities.
    pub fn nll(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let lp = self.value();
            let classes = *lp.shape().last().ok_or_else(|| shape_err!("nll of a scalar"))?;
            let rows = lp.len() / classes.max(1);
            if targets.len() != rows || rows == 0 {
                return Err(shape_err!(
                    "nll: {} targets for {rows} rows of {:?}",
                    targets.len(),
                    lp.shape()
                ));
            }
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                if t >= classes {
                    return Err(invalid!("label {t} out of range for {classes} classes"));
                }
                total += lp.data()[r * classes + t];
            }
            Tensor::scalar(-total / T::lit(rows as f64))
        };
        self.tape.push(
            value,
            Op::Nll {
                logp: self.id,
                targets: targets.to_vec(),
            },
            "nll",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis)?;
        if start >= end || end > shape[axis] {
            return Err(shape_err!("slice {start}..{end} of axis {axis} in {shape:?}"));
        }
        let value = {
            let x = self.value();
            let (outer, size, inner) = axis_split(&shape, axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = o * size * inner + start * inner;
                data.extend_from_slice(&x.data()[from..from + len * inner]);
            }
            let mut out_shape = shape.clone();
            out_shape[axis] = len;
            Tensor { shape: out_shape, data }
        };
        self.tape.push(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            "slice",
        )
    }
}
