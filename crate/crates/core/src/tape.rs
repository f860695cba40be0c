//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so parents always precede children. [`Tape::backward`] walks the
//! record once in reverse and returns the gradient of a scalar loss with
//! respect to every node that requires one.
//!
//! Broadcasting is never implicit. Operations that combine tensors of
//! different shapes say so in their name (`add_trailing`, `scale_rows`,
//! `broadcast_last`).

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::tensor::{numel, Real, Tensor};

pub type NodeId = usize;

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Deliberate gradient faults used as negative controls for the
/// verification suite. Never enabled in normal operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// `abs` backward uses `-sign(x)` instead of `sign(x)`.
    AbsGradient,
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    TransposeLast(NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddTrailing(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Abs(NodeId),
    Gelu(NodeId),
    SumLast(NodeId),
    MeanLast(NodeId),
    SumAll(NodeId),
    BroadcastLast(NodeId, usize),
    NormLast(NodeId),
    RecipOrZero(NodeId, T),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Vec<NodeId>, usize),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    ChannelMix {
        maps: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            fault: None,
        }
    }

    /// A tape whose backward pass contains a deliberate error.
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        // Nothing upstream needs a gradient: keep the value, drop the record.
        let op = if requires_grad { op } else { Op::Leaf };
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

    fn value(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. May be called once per recorded
    /// pass; call [`Tape::reset`] before recording the next one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::MissingNode(
                "loss was recorded on a different tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::MissingNode(format!("node {} not on tape", loss.id)));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::ONE]);
        let mut acc = Accumulator {
            grads: &mut grads,
            nodes: &nodes,
        };
        for id in (0..=loss.id).rev() {
            let Some(g) = acc.grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                backward_node(node, &g, &mut acc, self.fault);
            }
            acc.grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads,
            tape: self as *const Tape<T> as usize,
        })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    tape: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it was reachable.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        if var.tape as *const Tape<T> as usize != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable inputs.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

struct Accumulator<'a, T> {
    grads: &'a mut Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<T: Real> Accumulator<'_, T> {
    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Runs `f` on the gradient buffer of `id`, creating it on first use.
    fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.wants(id) {
            return;
        }
        let len = self.nodes[id].value.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![T::ZERO; len]);
        f(buf);
    }

    fn add(&mut self, id: NodeId, contrib: &[T]) {
        self.with(id, |buf| {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        });
    }
}

fn backward_node<T: Real>(
    node: &Node<T>,
    g: &[T],
    acc: &mut Accumulator<'_, T>,
    fault: Option<Fault>,
) {
    let nodes = acc.nodes;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (batch, m, k, n) = matmul_dims(acc.shape(a), acc.shape(b));
            if acc.wants(a) {
                let bv = nodes[b].value.data();
                acc.with(a, |da| {
                    for s in 0..batch {
                        kernels::matmul_nt(
                            &g[s * m * n..(s + 1) * m * n],
                            &bv[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            if acc.wants(b) {
                let av = nodes[a].value.data();
                acc.with(b, |db| {
                    for s in 0..batch {
                        kernels::matmul_tn(
                            &av[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
        }
        &Op::TransposeLast(a) => {
            let r = out_shape.len();
            let (rows, cols) = (out_shape[r - 2], out_shape[r - 1]);
            let back = kernels::transpose_last2(g, g.len() / (rows * cols), rows, cols);
            acc.add(a, &back);
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let (_, back) = kernels::permute(g, out_shape, &inverse);
            acc.add(*a, &back);
        }
        &Op::Reshape(a) => acc.add(a, g),
        &Op::Add(a, b) => {
            acc.add(a, g);
            acc.add(b, g);
        }
        &Op::Sub(a, b) => {
            acc.add(a, g);
            acc.with(b, |db| {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        &Op::Mul(a, b) => {
            if acc.wants(a) {
                let bv = nodes[b].value.data();
                acc.with(a, |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bv;
                    }
                });
            }
            if acc.wants(b) {
                let av = nodes[a].value.data();
                acc.with(b, |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * av;
                    }
                });
            }
        }
        &Op::Scale(a, s) => acc.with(a, |da| {
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv * s;
            }
        }),
        &Op::AddTrailing(a, b) => {
            acc.add(a, g);
            let n = numel(acc.shape(b));
            acc.with(b, |db| {
                for chunk in g.chunks_exact(n) {
                    for (d, &gv) in db.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
            });
        }
        &Op::ScaleRows(a, s) => {
            let n = *out_shape.last().unwrap();
            if acc.wants(a) {
                let sv = nodes[s].value.data();
                acc.with(a, |da| {
                    for ((drow, grow), &sv) in da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(sv)
                    {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv * sv;
                        }
                    }
                });
            }
            if acc.wants(s) {
                let av = nodes[a].value.data();
                acc.with(s, |ds| {
                    for ((d, grow), arow) in
                        ds.iter_mut().zip(g.chunks_exact(n)).zip(av.chunks_exact(n))
                    {
                        *d += kernels::dot(grow, arow);
                    }
                });
            }
        }
        &Op::Abs(a) => {
            let av = nodes[a].value.data();
            let flip = fault == Some(Fault::AbsGradient);
            acc.with(a, |da| {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                    let mut s = if x > T::ZERO {
                        T::ONE
                    } else if x < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    };
                    if flip {
                        s = -s;
                    }
                    *d += gv * s;
                }
            });
        }
        &Op::Gelu(a) => {
            let av = nodes[a].value.data();
            acc.with(a, |da| {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                    *d += gv * gelu_grad(x);
                }
            });
        }
        &Op::SumLast(a) | &Op::MeanLast(a) => {
            let n = *acc.shape(a).last().unwrap();
            let scale = match node.op {
                Op::MeanLast(_) => T::ONE / T::from_f64(n as f64),
                _ => T::ONE,
            };
            acc.with(a, |da| {
                for (drow, &gv) in da.chunks_exact_mut(n).zip(g) {
                    for d in drow {
                        *d += gv * scale;
                    }
                }
            });
        }
        &Op::SumAll(a) => {
            let gv = g[0];
            acc.with(a, |da| {
                for d in da {
                    *d += gv;
                }
            });
        }
        &Op::BroadcastLast(a, n) => acc.with(a, |da| {
            for (d, grow) in da.iter_mut().zip(g.chunks_exact(n)) {
                *d += grow.iter().copied().sum::<T>();
            }
        }),
        &Op::NormLast(a) => {
            let n = *acc.shape(a).last().unwrap();
            let av = nodes[a].value.data();
            let norms = node.value.data();
            acc.with(a, |da| {
                for (((drow, arow), &gv), &nv) in da
                    .chunks_exact_mut(n)
                    .zip(av.chunks_exact(n))
                    .zip(g)
                    .zip(norms)
                {
                    if nv == T::ZERO {
                        continue;
                    }
                    let f = gv / nv;
                    for (d, &x) in drow.iter_mut().zip(arow) {
                        *d += f * x;
                    }
                }
            });
        }
        &Op::RecipOrZero(a, _) => {
            let y = node.value.data();
            acc.with(a, |da| {
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    // d(1/x) = -1/x² = -y²
                    *d -= gv * yv * yv;
                }
            });
        }
        &Op::Softmax(a) => {
            let n = *out_shape.last().unwrap();
            let y = node.value.data();
            acc.with(a, |da| {
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let inner = kernels::dot(grow, yrow);
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - inner);
                    }
                }
            });
        }
        &Op::LogSoftmax(a) => {
            let n = *out_shape.last().unwrap();
            let y = node.value.data();
            acc.with(a, |da| {
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let total: T = grow.iter().copied().sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - yv.exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = *out_shape.last().unwrap();
            let gm = nodes[*gamma].value.data();
            acc.with(*beta, |db| {
                for grow in g.chunks_exact(n) {
                    for (d, &gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            });
            acc.with(*gamma, |dg| {
                for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for ((d, &gv), &xh) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d += gv * xh;
                    }
                }
            });
            let inv_n = T::ONE / T::from_f64(n as f64);
            acc.with(*x, |dx| {
                let mut dxhat = vec![T::ZERO; n];
                for (((drow, grow), xrow), &rs) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(xhat.chunks_exact(n))
                    .zip(rstd)
                {
                    for ((dh, &gv), &gmv) in dxhat.iter_mut().zip(grow).zip(gm) {
                        *dh = gv * gmv;
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
                    let mean_dx = kernels::dot(&dxhat, xrow) * inv_n;
                    for ((d, &dh), &xh) in drow.iter_mut().zip(&dxhat).zip(xrow) {
                        *d += rs * (dh - mean_d - xh * mean_dx);
                    }
                }
            });
        }
        Op::Concat(parts, axis) => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = acc.shape(p)[*axis] * inner;
                acc.with(p, |dp| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        for (d, &gv) in dp[o * width..(o + 1) * width].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                });
                offset += width;
            }
        }
        &Op::Slice { src, axis, start } => {
            let src_shape = acc.shape(src).to_vec();
            let outer: usize = src_shape[..axis].iter().product();
            let inner: usize = src_shape[axis + 1..].iter().product();
            let total = src_shape[axis] * inner;
            let width = out_shape[axis] * inner;
            acc.with(src, |ds| {
                for o in 0..outer {
                    let dst = &mut ds[o * total + start * inner..o * total + start * inner + width];
                    for (d, &gv) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *d += gv;
                    }
                }
            });
        }
        &Op::ChannelMix { maps, weight, bias } => {
            let (batch, c_in, c_out, plane) = channel_mix_dims(acc.shape(maps), acc.shape(weight));
            let w = nodes[weight].value.data();
            acc.with(bias, |db| {
                for s in 0..batch {
                    for (o, d) in db.iter_mut().enumerate() {
                        let base = (s * c_out + o) * plane;
                        *d += g[base..base + plane].iter().copied().sum::<T>();
                    }
                }
            });
            if acc.wants(weight) {
                let dv = nodes[maps].value.data();
                acc.with(weight, |dw| {
                    for s in 0..batch {
                        for o in 0..c_out {
                            let go = &g[(s * c_out + o) * plane..(s * c_out + o + 1) * plane];
                            for c in 0..c_in {
                                let dc = &dv[(s * c_in + c) * plane..(s * c_in + c + 1) * plane];
                                dw[o * c_in + c] += kernels::dot(go, dc);
                            }
                        }
                    }
                });
            }
            acc.with(maps, |dd| {
                for s in 0..batch {
                    for o in 0..c_out {
                        let go = &g[(s * c_out + o) * plane..(s * c_out + o + 1) * plane];
                        for c in 0..c_in {
                            let wv = w[o * c_in + c];
                            let dst = &mut dd[(s * c_in + c) * plane..(s * c_in + c + 1) * plane];
                            for (d, &gv) in dst.iter_mut().zip(go) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            });
        }
    }
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_SCALE);
    let k = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * k * x * x)
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_SCALE);
    let k = T::from_f64(GELU_COEF);
    T::from_f64(0.5) * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

/// (batch, m, k, n) for a (possibly batched) product.
fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    let r = a.len();
    (numel(&a[..r - 2]), a[r - 2], a[r - 1], b[r - 1])
}

/// (batch, c_in, c_out, plane) for a 1×1 channel mix.
fn channel_mix_dims(maps: &[usize], weight: &[usize]) -> (usize, usize, usize, usize) {
    let r = maps.len();
    (
        numel(&maps[..r - 3]),
        maps[r - 3],
        weight[0],
        maps[r - 2] * maps[r - 1],
    )
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::MissingNode(
                "operands live on different tapes".into(),
            ))
        }
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> Var<'t, T> {
        let rg = parents.iter().any(|&p| self.tape.requires_grad(p));
        self.tape.push(value, op, rg)
    }

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// identical.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (batch, m, k, n) = matmul_dims(sa, sb);
        if sb[sb.len() - 2] != k {
            return dim_err(format!("matmul: inner dims differ for {sa:?} and {sb:?}"));
        }
        let mut out = vec![T::ZERO; batch * m * n];
        for s in 0..batch {
            kernels::matmul_nn(
                &a.data()[s * m * k..(s + 1) * m * k],
                &b.data()[s * k * n..(s + 1) * k * n],
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.emit(
            Tensor::from_parts(shape, out),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let r = a.rank();
        if r < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {:?}", a.shape()));
        }
        let (rows, cols) = (a.shape()[r - 2], a.shape()[r - 1]);
        let data = kernels::transpose_last2(a.data(), a.len() / (rows * cols), rows, cols);
        let mut shape = a.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::TransposeLast(self.id),
            &[self.id],
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let mut seen = vec![false; a.rank()];
        if axes.len() != a.rank()
            || axes
                .iter()
                .any(|&x| x >= a.rank() || std::mem::replace(&mut seen[x], true))
        {
            return dim_err(format!(
                "permute: {axes:?} is not a permutation of {:?}",
                a.shape()
            ));
        }
        let (shape, data) = kernels::permute(a.data(), a.shape(), axes);
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Permute(self.id, axes.to_vec()),
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self.emit(value, Op::Reshape(self.id), &[self.id]))
    }

    fn binary(self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return dim_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            ));
        }
        a.zip_map(&b, f)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.emit(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.emit(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.emit(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * s);
        self.emit(v, Op::Scale(self.id, s), &[self.id])
    }

    /// Adds `other` to every trailing block of `self`: `other`'s shape must
    /// equal the trailing axes of `self` (bias vectors, positional tables).
    pub fn add_trailing(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("add_trailing: {sb:?} is not a suffix of {sa:?}"));
        }
        let n = b.len();
        let mut data = a.to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.emit(
            Tensor::from_parts(sa.to_vec(), data),
            Op::AddTrailing(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Multiplies each last-axis row of `self` by the matching entry of
    /// `scales`, whose shape is `self`'s shape without the last axis.
    pub fn scale_rows(self, scales: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&scales)?;
        let (a, s) = (self.value(), scales.value());
        let sa = a.shape();
        if sa.len() < 2 || s.shape() != &sa[..sa.len() - 1] {
            return dim_err(format!(
                "scale_rows: {:?} does not index the rows of {sa:?}",
                s.shape()
            ));
        }
        let n = *sa.last().unwrap();
        let mut data = a.to_vec();
        for (row, &sv) in data.chunks_exact_mut(n).zip(s.data()) {
            for x in row {
                *x *= sv;
            }
        }
        Ok(self.emit(
            Tensor::from_parts(sa.to_vec(), data),
            Op::ScaleRows(self.id, scales.id),
            &[self.id, scales.id],
        ))
    }

    /// Entrywise absolute value; the derivative at 0 is taken as 0.
    pub fn abs(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.abs());
        self.emit(v, Op::Abs(self.id), &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let v = self.value().map(gelu);
        self.emit(v, Op::Gelu(self.id), &[self.id])
    }

    fn reduce_last(self, name: &str, f: impl Fn(&[T]) -> T) -> Result<Tensor<T>> {
        let a = self.value();
        let sa = a.shape();
        let n = *sa.last().unwrap();
        let data: Vec<T> = a.data().chunks_exact(n).map(f).collect();
        let shape = if sa.len() > 1 {
            sa[..sa.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let _ = name;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn sum_last(self) -> Result<Var<'t, T>> {
        let v = self.reduce_last("sum_last", |r| r.iter().copied().sum())?;
        Ok(self.emit(v, Op::SumLast(self.id), &[self.id]))
    }

    /// Arithmetic mean over the last axis.
    pub fn mean_last(self) -> Result<Var<'t, T>> {
        let v = self.reduce_last("mean_last", |r| {
            r.iter().copied().sum::<T>() / T::from_f64(r.len() as f64)
        })?;
        Ok(self.emit(v, Op::MeanLast(self.id), &[self.id]))
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(self) -> Result<Var<'t, T>> {
        let v = self.reduce_last("norm_last", |r| kernels::dot(r, r).sqrt())?;
        Ok(self.emit(v, Op::NormLast(self.id), &[self.id]))
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.emit(v, Op::SumAll(self.id), &[self.id])
    }

    /// Repeats every entry `n` times along a new last axis.
    pub fn broadcast_last(self, n: usize) -> Result<Var<'t, T>> {
        if n == 0 {
            return dim_err("broadcast_last: zero-length axis");
        }
        let a = self.value();
        let data: Vec<T> = a
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        let mut shape = a.shape().to_vec();
        shape.push(n);
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::BroadcastLast(self.id, n),
            &[self.id],
        ))
    }

    /// `1/x` where `|x| >= tol`, exactly zero elsewhere.
    pub fn recip_or_zero(self, tol: T) -> Var<'t, T> {
        let v = self
            .value()
            .map(|x| if x.abs() >= tol { T::ONE / x } else { T::ZERO });
        self.emit(v, Op::RecipOrZero(self.id, tol), &[self.id])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        a.check_finite("softmax_rows")?;
        let n = *a.shape().last().unwrap();
        let mut data = a.to_vec();
        for row in data.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(row[0], T::max);
            let mut total = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                total += *x;
            }
            let inv = T::ONE / total;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        Ok(self.emit(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Softmax(self.id),
            &[self.id],
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        a.check_finite("log_softmax_rows")?;
        let n = *a.shape().last().unwrap();
        let mut data = a.to_vec();
        for row in data.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(row[0], T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Ok(self.emit(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::LogSoftmax(self.id),
            &[self.id],
        ))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let n = *x.shape().last().unwrap();
        if gm.shape() != [n] || bt.shape() != [n] {
            return dim_err(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match last axis {n}",
                gm.shape(),
                bt.shape()
            ));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_n = T::ONE / T::from_f64(n as f64);
        let mut xhat = x.to_vec();
        let mut rstd = Vec::with_capacity(x.len() / n);
        for row in xhat.chunks_exact_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let mut var = T::ZERO;
            for v in row.iter_mut() {
                *v -= mean;
                var += *v * *v;
            }
            let rs = T::ONE / (var * inv_n + eps).sqrt();
            for v in row.iter_mut() {
                *v *= rs;
            }
            rstd.push(rs);
        }
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(n) {
            for ((v, &g), &b) in row.iter_mut().zip(gm.data()).zip(bt.data()) {
                *v = *v * g + b;
            }
        }
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            op,
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Extracts `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let sa = a.shape();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return dim_err(format!(
                "slice: [{start}, {start}+{len}) out of range on axis {axis} of {sa:?}"
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let total = sa[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &a.data()[o * total + start * inner..o * total + (start + len) * inner],
            );
        }
        let mut shape = sa.to_vec();
        shape[axis] = len;
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }
}

/// Concatenates `parts` along `axis`; every other axis must agree.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let Some(first) = parts.first() else {
        return Err(Error::Contract("concat of zero tensors".into()));
    };
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let s0 = values[0].shape();
    if axis >= s0.len() {
        return dim_err(format!("concat: axis {axis} out of range for {s0:?}"));
    }
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p)?;
        let s = v.shape();
        let compatible = s.len() == s0.len()
            && s.iter()
                .zip(s0)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return dim_err(format!(
                "concat: shapes {s0:?} and {s:?} disagree off axis {axis}"
            ));
        }
    }
    let outer: usize = s0[..axis].iter().product();
    let inner: usize = s0[axis + 1..].iter().product();
    let mut shape = s0.to_vec();
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for v in &values {
            let w = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    Ok(first.emit(
        Tensor::from_parts(shape, data),
        Op::Concat(ids.clone(), axis),
        &ids,
    ))
}

/// Per-position linear map across the channel axis (a 1×1 convolution).
///
/// `maps` is `[..., c_in, rows, cols]`, `weight` is `[c_out, c_in]` and
/// `bias` is `[c_out]`; the result is `[..., c_out, rows, cols]` with
/// `out[o] = bias[o] + Σ_c weight[o, c] · maps[c]`.
pub fn channel_mix_1x1<'t, T: Real>(
    maps: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    maps.same_tape(&weight)?;
    maps.same_tape(&bias)?;
    let (d, w, b) = (maps.value(), weight.value(), bias.value());
    let sd = d.shape();
    if sd.len() < 3
        || w.rank() != 2
        || w.shape()[1] != sd[sd.len() - 3]
        || b.shape() != [w.shape()[0]]
    {
        return dim_err(format!(
            "channel_mix_1x1: maps {sd:?}, weight {:?}, bias {:?} are inconsistent",
            w.shape(),
            b.shape()
        ));
    }
    let (batch, c_in, c_out, plane) = channel_mix_dims(sd, w.shape());
    let mut out = vec![T::ZERO; batch * c_out * plane];
    for s in 0..batch {
        for o in 0..c_out {
            let dst = &mut out[(s * c_out + o) * plane..(s * c_out + o + 1) * plane];
            dst.fill(b.data()[o]);
            for c in 0..c_in {
                let wv = w.data()[o * c_in + c];
                let src = &d.data()[(s * c_in + c) * plane..(s * c_in + c + 1) * plane];
                for (x, &v) in dst.iter_mut().zip(src) {
                    *x += wv * v;
                }
            }
        }
    }
    let mut shape = sd.to_vec();
    let r = shape.len();
    shape[r - 3] = c_out;
    let op = Op::ChannelMix {
        maps: maps.id,
        weight: weight.id,
        bias: bias.id,
    };
    Ok(maps.emit(
        Tensor::from_parts(shape, out),
        op,
        &[maps.id, weight.id, bias.id],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(i2.matmul(b).unwrap().value().data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = tape.constant(t(&[2, 1], &[5., 6.]));
        assert_eq!(a.matmul(c).unwrap().value().data(), &[17., 39.]);

        let x = tape.constant(Tensor::zeros([2, 3]));
        let err = x.matmul(x).unwrap_err();
        assert!(
            matches!(err, Error::Dimension(ref m) if m.contains("[2, 3]")),
            "{err}"
        );
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape
            .constant(t(&[4], &[0.; 4]))
            .softmax_rows()
            .unwrap()
            .value();
        assert_eq!(s.data(), &[0.25; 4]);

        let s = tape
            .constant(t(&[2], &[0., 2f64.ln()]))
            .softmax_rows()
            .unwrap()
            .value();
        assert!((s.data()[0] - 1. / 3.).abs() < 1e-15 && (s.data()[1] - 2. / 3.).abs() < 1e-15);

        let s = tape
            .constant(t(&[2], &[1000., 0.]))
            .softmax_rows()
            .unwrap()
            .value();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.).abs() < 1e-15 && s.data()[1] < 1e-300);

        let bad = tape.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(bad.softmax_rows(), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.param(t(&[1, 2], &[-2., 3.]));
        assert_eq!(a.abs().value().data(), &[2., 3.]);

        let z = tape.param(t(&[1], &[0.]));
        let loss = z.abs().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.]);

        let tape = Tape::new();
        let m = tape
            .constant(t(&[2, 2], &[1., 3., 5., 7.]))
            .mean_last()
            .unwrap();
        assert_eq!(m.shape(), vec![2]);
        assert_eq!(m.value().data(), &[2., 6.]);

        let x = tape.constant(Tensor::zeros([2, 2]));
        let y = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(x.add(y), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_examples() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::<f64>::zeros([4, 8, 8]));
        assert_eq!(concat(&[m, m, m], 0).unwrap().shape(), vec![12, 8, 8]);
        assert_eq!(concat(&[m], 0).unwrap().value(), m.value());
        let n = tape.constant(Tensor::<f64>::zeros([4, 9, 9]));
        assert!(matches!(concat(&[m, n], 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn channel_mix_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::<f64>::full([3, 2, 2], 1.0));
        let w = tape.constant(t(&[1, 3], &[1., 1., 1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let out = channel_mix_1x1(ones, w, b).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 2]);
        assert_eq!(out.value().data(), &[3.; 4]);

        let w_bad = tape.constant(Tensor::<f64>::zeros([1, 2]));
        assert!(matches!(
            channel_mix_1x1(ones, w_bad, b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_norm_and_gelu_examples() {
        let tape = Tape::new();
        let gamma = tape.constant(Tensor::full([2], 1.0));
        let beta = tape.constant(Tensor::zeros([2]));
        let c = tape
            .constant(t(&[1, 2], &[5., 5.]))
            .layer_norm(gamma, beta)
            .unwrap();
        assert_eq!(c.value().data(), &[0., 0.]);
        let y = tape
            .constant(t(&[1, 2], &[1., 3.]))
            .layer_norm(gamma, beta)
            .unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.value().data()[0] + expect).abs() < 1e-12);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-4);
        assert_eq!(tape.constant(t(&[1], &[0.])).gelu().value().data(), &[0.]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let loss = x.mul(x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let other = Tape::new();
        let y = other.param(t(&[1], &[1.]));
        assert!(matches!(tape.backward(y), Err(Error::MissingNode(_))));
    }

    #[test]
    fn reset_allows_a_new_pass() {
        let mut tape = Tape::<f64>::new();
        {
            let x = tape.param(t(&[1], &[3.]));
            tape.backward(x.sum_all()).unwrap();
        }
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.param(t(&[1], &[3.]));
        let g = tape.backward(x.scale(2.0).sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.]);
    }

    #[test]
    fn constants_do_not_record_ops() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::eye(2));
        let b = a.matmul(a).unwrap();
        assert!(!b.requires_grad());
    }
}
