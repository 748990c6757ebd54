//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order, so parents always precede children. Calling
//! [`Var::backward`] walks the recording in reverse and accumulates
//! `dL/dx` for every node that requires a gradient. Operations whose inputs
//! are all constants are recorded as constants, which makes an inference-only
//! forward pass cost nothing beyond the values themselves.

use std::cell::RefCell;
use std::sync::Arc;

use super::gemm::{gemm, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// How the right operand of a binary op is expanded to the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right shape equals the trailing dimensions of the left shape.
    Trailing,
    Scalar,
}

impl Broadcast {
    fn resolve(big: &[usize], small: &[usize]) -> Option<Self> {
        if big == small {
            Some(Broadcast::Same)
        } else if small.iter().product::<usize>() == 1 {
            Some(Broadcast::Scalar)
        } else if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
            Some(Broadcast::Trailing)
        } else {
            None
        }
    }

    fn index(self, i: usize, small_len: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Trailing => i % small_len,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Saved state needed to run an operation backwards.
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary {
        kind: Binary,
        lhs: NodeId,
        rhs: NodeId,
        bcast: Broadcast,
    },
    Scale(NodeId, f32),
    Silu(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    ConcatRows(NodeId, NodeId),
    Rope {
        x: NodeId,
        cos: Vec<f32>,
        sin: Vec<f32>,
        heads: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: Vec<f32>,
        geom: AttnGeometry,
    },
    QuantileLoss {
        preds: NodeId,
        /// d(loss)/d(pred) per element, precomputed in the forward pass.
        slope: Vec<f32>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeometry {
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    head_dim: usize,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Recording of a computation. Rebuilt for every step.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Rotary-position phases for rows laid out as `batch × len` starting at
/// absolute position `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RopeLayout {
    pub batch: usize,
    pub len: usize,
    pub offset: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        // Ops without a differentiable input need no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        inner.grads.push(None);
        Var { tape: self, id }
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf shared with its owner without copying.
    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Shared leaf that never receives a gradient.
    pub fn frozen(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Accumulated gradient of `var`; zeros when nothing has flowed into it.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let inner = self.inner.borrow();
        let shape = inner.nodes[var.id].value.shape().to_vec();
        match &inner.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Drops every accumulated gradient.
    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn backward_from(&self, root: NodeId) -> Result<()> {
        let inner = self.inner.borrow();
        let root_node = &inner.nodes[root];
        if root_node.value.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: root_node.value.shape().to_vec(),
            });
        }
        let mut local: Vec<Option<Vec<f32>>> = vec![None; root + 1];
        local[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&inner.nodes, node, &g, &mut local);
            local[id] = Some(g);
        }
        drop(inner);

        let mut inner = self.inner.borrow_mut();
        for (id, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            match &mut inner.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(local: &mut [Option<Vec<f32>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f32])) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = local[id].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Backward rule for `node`, adding its contribution into parents' slots.
fn propagate(nodes: &[Node], node: &Node, g: &[f32], local: &mut [Option<Vec<f32>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            accumulate(local, nodes, *a, |ga| {
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    g,
                    Strides::row_major(n),
                    bv.data(),
                    Strides::transposed(n),
                    1.0,
                    ga,
                    Strides::row_major(k),
                )
            });
            accumulate(local, nodes, *b, |gb| {
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    av.data(),
                    Strides::transposed(k),
                    g,
                    Strides::row_major(n),
                    1.0,
                    gb,
                    Strides::row_major(n),
                )
            });
        }
        Op::Binary {
            kind,
            lhs,
            rhs,
            bcast,
        } => {
            let lv = &nodes[*lhs].value;
            let rv = &nodes[*rhs].value;
            let rn = rv.numel();
            accumulate(local, nodes, *lhs, |gl| match kind {
                Binary::Add | Binary::Sub => gl.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                Binary::Mul => {
                    for (i, gi) in gl.iter_mut().enumerate() {
                        *gi += g[i] * rv.data()[bcast.index(i, rn)];
                    }
                }
            });
            accumulate(local, nodes, *rhs, |gr| {
                for (i, gi) in g.iter().enumerate() {
                    let j = bcast.index(i, rn);
                    gr[j] += match kind {
                        Binary::Add => *gi,
                        Binary::Sub => -*gi,
                        Binary::Mul => gi * lv.data()[i],
                    };
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(local, nodes, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            });
        }
        Op::Silu(x) => {
            let xv = &nodes[*x].value;
            accumulate(local, nodes, *x, |gx| {
                for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    let s = sigmoid(xi);
                    *a += b * s * (1.0 + xi * (1.0 - s));
                }
            });
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            accumulate(local, nodes, *x, |gx| {
                for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    if xi > 0.0 {
                        *a += b;
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let n = y.cols();
            accumulate(local, nodes, *x, |gx| {
                for r in 0..y.rows() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - dot);
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
            let gv = &nodes[*gamma].value;
            let d = gv.numel();
            let rows = xhat.len() / d;
            accumulate(local, nodes, *gamma, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            accumulate(local, nodes, *beta, |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            });
            accumulate(local, nodes, *x, |gx| {
                let mut dxhat = vec![0.0f32; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = g[r * d + j] * gv.data()[j];
                    }
                    let mean_d = dxhat.iter().sum::<f32>() / d as f32;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(local, nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
        Op::Mean(x) => {
            let n = nodes[*x].value.numel() as f32;
            accumulate(local, nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
        }
        Op::Reshape(x) => {
            accumulate(local, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b))
        }
        Op::ConcatRows(a, b) => {
            let na = nodes[*a].value.numel();
            accumulate(local, nodes, *a, |ga| {
                ga.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y)
            });
            accumulate(local, nodes, *b, |gb| {
                gb.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y)
            });
        }
        Op::Rope { x, cos, sin, heads } => {
            let d = node.value.cols();
            accumulate(local, nodes, *x, |gx| rotate(g, gx, cos, sin, d, *heads, true));
        }
        Op::Attention {
            q,
            k,
            v,
            probs,
            geom,
        } => attention_backward(nodes, g, local, *q, *k, *v, probs, *geom),
        Op::QuantileLoss { preds, slope } => {
            accumulate(local, nodes, *preds, |gp| {
                gp.iter_mut().zip(slope).for_each(|(a, s)| *a += g[0] * s)
            });
        }
    }
}

/// Applies per-row rotary phases. `inverse` rotates by the negated angle,
/// which is the adjoint used in the backward pass.
fn rotate(src: &[f32], dst: &mut [f32], cos: &[f32], sin: &[f32], d: usize, heads: usize, inverse: bool) {
    let head_dim = d / heads;
    let half = head_dim / 2;
    let rows = src.len() / d;
    for r in 0..rows {
        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for h in 0..heads {
            let base = r * d + h * head_dim;
            for i in 0..half {
                let (x0, x1) = (src[base + 2 * i], src[base + 2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                dst[base + 2 * i] += x0 * c[i] - x1 * sn;
                dst[base + 2 * i + 1] += x0 * sn + x1 * c[i];
            }
        }
    }
}

/// Rotary phases for every row of a `batch × len` layout.
pub fn rope_tables(layout: RopeLayout, head_dim: usize, base: f32) -> (Vec<f32>, Vec<f32>) {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(layout.batch * layout.len * half);
    let mut sin = Vec::with_capacity(cos.capacity());
    for _ in 0..layout.batch {
        for t in 0..layout.len {
            let pos = (layout.offset + t) as f64;
            for f in &inv_freq {
                let (s, c) = (pos * f).sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
        }
    }
    (cos, sin)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    g: &[f32],
    local: &mut [Option<Vec<f32>>],
    q: NodeId,
    k: NodeId,
    v: NodeId,
    probs: &[f32],
    geom: AttnGeometry,
) {
    let AttnGeometry {
        batch,
        heads,
        tq,
        tk,
        head_dim,
    } = geom;
    let d = heads * head_dim;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let qv = nodes[q].value.clone();
    let kv = nodes[k].value.clone();
    let vv = nodes[v].value.clone();
    let mut dq = vec![0.0f32; qv.numel()];
    let mut dk = vec![0.0f32; kv.numel()];
    let mut dv = vec![0.0f32; vv.numel()];
    let mut dp = vec![0.0f32; tq * tk];
    let row = Strides::row_major(d);
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * tq * tk..][..tq * tk];
            let qo = b * tq * d + h * head_dim;
            let ko = b * tk * d + h * head_dim;
            // dV = Pᵀ·dO
            gemm(tk, tq, head_dim, 1.0, p, Strides::transposed(tk), &g[qo..], row, 1.0, &mut dv[ko..], row);
            // dP = dO·Vᵀ
            gemm(tq, head_dim, tk, 1.0, &g[qo..], row, &vv.data()[ko..], Strides::transposed(d), 0.0, &mut dp, Strides::row_major(tk));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..tk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(tq, tk, head_dim, 1.0, &dp, Strides::row_major(tk), &kv.data()[ko..], row, 1.0, &mut dq[qo..], row);
            gemm(tk, tq, head_dim, 1.0, &dp, Strides::transposed(tk), &qv.data()[qo..], row, 1.0, &mut dk[ko..], row);
        }
    }
    for (id, grad) in [(q, dq), (k, dk), (v, dv)] {
        accumulate(local, nodes, id, |slot| slot.iter_mut().zip(&grad).for_each(|(a, b)| *a += b));
    }
}

/// Numerically stable in-place softmax over `row[..valid]`; entries past
/// `valid` are set to exactly zero.
fn softmax_prefix(row: &mut [f32], valid: usize) {
    let max = row[..valid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in &mut row[..valid] {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in &mut row[..valid] {
        *x /= sum;
    }
    row[valid..].fill(0.0);
}

impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(self) -> Tensor {
        self.tape.grad(self)
    }

    /// Accumulates `dself/dx` into every reachable node that requires it.
    pub fn backward(self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn same_tape(self, other: Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn rg(self, others: &[Var<'_>]) -> bool {
        self.requires_grad() || others.iter().any(|o| o.requires_grad())
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            a.data(),
            Strides::row_major(k),
            b.data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), self.rg(&[other])))
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let bcast = match Broadcast::resolve(a.shape(), b.shape()) {
            Some(bc) => bc,
            None => {
                // Commutative ops may broadcast the left operand instead.
                if !matches!(kind, Binary::Sub) && Broadcast::resolve(b.shape(), a.shape()).is_some() {
                    return other.binary(self, kind);
                }
                return Err(Error::dim("elementwise", a.shape(), b.shape()));
            }
        };
        let bn = b.numel();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bcast.index(i, bn)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let op = Op::Binary {
            kind,
            lhs: self.id,
            rhs: other.id,
            bcast,
        };
        Ok(self.tape.push(value, op, self.rg(&[other])))
    }

    /// Elementwise sum; `other` may broadcast over trailing dimensions or as
    /// a scalar.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, c: f32) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(value, Op::Scale(self.id, c), self.requires_grad())
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(value, Op::Silu(self.id), self.requires_grad())
    }

    /// `max(x, 0)`.
    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(value, Op::Relu(self.id), self.requires_grad())
    }

    /// Softmax along the last dimension. `mask` holds `true` for entries
    /// that participate and has either the trailing-dimension length or the
    /// full element count; masked entries come out as exactly zero.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.cols();
        if let Some(m) = mask {
            if m.len() != n && m.len() != a.numel() {
                return Err(Error::dim("softmax_rows", a.shape(), &[m.len()]));
            }
        }
        let mut data = a.data().to_vec();
        for r in 0..a.rows() {
            let row = &mut data[r * n..(r + 1) * n];
            let keep = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == n => m[j],
                Some(m) => m[r * n + j],
            };
            if !(0..n).any(keep) {
                return Err(Error::DegenerateRow { row: r });
            }
            let max = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, Op::Softmax(self.id), self.requires_grad()))
    }

    /// Per-row normalization over the last dimension followed by
    /// `gamma · x̂ + beta`.
    pub fn layernorm(self, gamma: Var<'t>, beta: Var<'t>, eps: f32) -> Result<Var<'t>> {
        let a = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = a.cols();
        if d == 0 || gv.numel() != d || bv.numel() != d {
            return Err(Error::dim("layernorm", a.shape(), gv.shape()));
        }
        let rows = a.rows();
        let mut xhat = vec![0.0f32; a.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; a.numel()];
        for r in 0..rows {
            let x = a.row(r);
            let mean = x.iter().sum::<f32>() / d as f32;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (x[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(value, op, self.rg(&[gamma, beta])))
    }

    pub fn sum(self) -> Var<'t> {
        let s: f32 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let s = a.data().iter().sum::<f32>() / a.numel().max(1) as f32;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Stacks two 2-D operands with equal column counts vertically.
    pub fn concat_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols() {
            return Err(Error::dim("concat_rows", a.shape(), b.shape()));
        }
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let value = Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)?;
        Ok(self
            .tape
            .push(value, Op::ConcatRows(self.id, other.id), self.rg(&[other])))
    }

    /// Rotary position embedding over `heads` column blocks of a
    /// `(batch·len) × d` matrix, rotating consecutive column pairs.
    pub fn rope(self, layout: RopeLayout, heads: usize, base: f32) -> Result<Var<'t>> {
        let a = self.value();
        let d = a.cols();
        if a.ndim() != 2 || heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
            return Err(Error::dim("rope", a.shape(), &[heads]));
        }
        if a.rows() != layout.batch * layout.len {
            return Err(Error::dim("rope", a.shape(), &[layout.batch, layout.len]));
        }
        let (cos, sin) = rope_tables(layout, d / heads, base);
        let mut out = vec![0.0; a.numel()];
        rotate(a.data(), &mut out, &cos, &sin, d, heads, false);
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let op = Op::Rope {
            x: self.id,
            cos,
            sin,
            heads,
        };
        Ok(self.tape.push(value, op, self.requires_grad()))
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `self` holds queries `(batch·tq) × d`, `keys`/`values` are
    /// `(batch·tk) × d`. Query `i` sits at absolute position `offset + i`
    /// and sees keys `0..=offset + i`; `offset` is the number of cached keys
    /// that precede the queries.
    pub fn causal_attention(
        self,
        keys: Var<'t>,
        values: Var<'t>,
        batch: usize,
        heads: usize,
        offset: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(keys);
        self.same_tape(values);
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let d = q.cols();
        if heads == 0 || d % heads != 0 || k.cols() != d || v.shape() != k.shape() {
            return Err(Error::dim("causal_attention", q.shape(), k.shape()));
        }
        if batch == 0 || q.rows() % batch != 0 || k.rows() % batch != 0 {
            return Err(Error::dim("causal_attention", q.shape(), &[batch]));
        }
        let (tq, tk) = (q.rows() / batch, k.rows() / batch);
        if offset + tq > tk {
            return Err(Error::dim("causal_attention", &[offset, tq], &[tk]));
        }
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut probs = vec![0.0f32; batch * heads * tq * tk];
        let mut out = vec![0.0f32; q.numel()];
        let row = Strides::row_major(d);
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * tk..][..tq * tk];
                let qo = b * tq * d + h * head_dim;
                let ko = b * tk * d + h * head_dim;
                gemm(tq, head_dim, tk, scale, &q.data()[qo..], row, &k.data()[ko..], Strides::transposed(d), 0.0, p, Strides::row_major(tk));
                for i in 0..tq {
                    softmax_prefix(&mut p[i * tk..(i + 1) * tk], offset + i + 1);
                }
                gemm(tq, tk, head_dim, 1.0, p, Strides::row_major(tk), &v.data()[ko..], row, 0.0, &mut out[qo..], row);
            }
        }
        let value = Tensor::new(q.shape().to_vec(), out)?;
        let op = Op::Attention {
            q: self.id,
            k: keys.id,
            v: values.id,
            probs,
            geom: AttnGeometry {
                batch,
                heads,
                tq,
                tk,
                head_dim,
            },
        };
        Ok(self.tape.push(value, op, self.rg(&[keys, values])))
    }

    /// Weighted mean pinball loss of `self` (predictions grouped as
    /// `groups × n_q × width`) against `targets` (`groups × width`), skipping
    /// positions where `mask` is zero. Returns the scalar loss and the number
    /// of counted (target, level) terms.
    pub fn pinball_loss(
        self,
        targets: &[f32],
        mask: &[f32],
        levels: &[f32],
        weights: &[f32],
        width: usize,
    ) -> Result<(Var<'t>, usize)> {
        let preds = self.value();
        let n_q = levels.len();
        if n_q == 0 || weights.len() != n_q || targets.len() != mask.len() {
            return Err(Error::dim("pinball_loss", &[levels.len(), weights.len()], &[targets.len(), mask.len()]));
        }
        if width == 0 || targets.is_empty() || !targets.len().is_multiple_of(width) || preds.numel() != targets.len() * n_q {
            return Err(Error::dim("pinball_loss", preds.shape(), &[targets.len(), n_q, width]));
        }
        for &q in levels {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::InvalidQuantile(q as f64));
            }
        }
        let groups = targets.len() / width;
        let counted = mask.iter().filter(|&&m| m != 0.0).count();
        if counted == 0 {
            return Err(Error::EmptyLoss);
        }
        let n_terms = counted * n_q;
        let denom = n_terms as f64;
        let pd = preds.data();
        let mut slope = vec![0.0f32; pd.len()];
        let mut total = 0.0f64;
        for g in 0..groups {
            for (qi, (&q, &w)) in levels.iter().zip(weights).enumerate() {
                for j in 0..width {
                    let t = g * width + j;
                    if mask[t] == 0.0 {
                        continue;
                    }
                    let p = (g * n_q + qi) * width + j;
                    let y = targets[t];
                    let yhat = pd[p];
                    // Kink belongs to the y >= ŷ branch.
                    let (loss, ds) = if y >= yhat {
                        (q * (y - yhat), -q)
                    } else {
                        ((1.0 - q) * (yhat - y), 1.0 - q)
                    };
                    total += (w * loss) as f64;
                    slope[p] = (w as f64 * ds as f64 / denom) as f32;
                }
            }
        }
        let value = Tensor::scalar((total / denom) as f32);
        let var = self.tape.push(value, Op::QuantileLoss { preds: self.id, slope }, self.requires_grad());
        Ok((var, n_terms))
    }
}
