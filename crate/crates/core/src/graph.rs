//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Each node records the
//! operation that produced it and the ids of its inputs, which always refer
//! to earlier nodes, so the tape is acyclic by construction. Calling
//! [`Graph::backward`] walks the tape once in reverse from a scalar root.
//!
//! Only nodes that depend on a [`Graph::param`] leaf carry gradients;
//! [`Graph::constant`] leaves and everything computed purely from them are
//! skipped during the reverse sweep.
//!
//! Operations that are awkward to express as a chain of primitives (fused
//! attention, pairwise loss terms) plug in through the [`Kernel`] trait.

use std::sync::Arc;

use crate::error::{MathError, MathResult};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Square,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// `b` is 1×n and repeats over the m rows of `a`.
    RowsOfB,
    /// `a` is 1×n and repeats over the m rows of `b`.
    RowsOfA,
}

/// A custom differentiable operation with a hand-written adjoint.
pub trait Kernel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Computes the output and any buffers the adjoint needs.
    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)>;

    /// Gradients for each input given the upstream gradient `grad`
    /// (same shape as the output). `None` means "no gradient flows".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>>;
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(Elementwise, NodeId, NodeId, Broadcast),
    Unary(Elementwise, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Clamp(NodeId, f64, f64),
    Reduce(Reduction, NodeId, Option<usize>),
    SoftmaxRows(NodeId),
    Reshape(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Custom(Arc<dyn Kernel>, Vec<NodeId>, Vec<Vec<f64>>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as fixed data.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.grads.get(id.0)?.as_ref().map(|g| {
            Tensor::from_parts_unchecked(self.nodes[id.0].value.shape().to_vec(), g.clone())
        })
    }

    pub fn grad_data(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn matrix_dims(&self, id: NodeId) -> MathResult<(usize, usize)> {
        self.value(id).dims2()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> MathResult<NodeId> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(MathError::Dimension(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Generic entrywise dispatch; `b` is required exactly for binary ops.
    pub fn elementwise(
        &mut self,
        op: Elementwise,
        a: NodeId,
        b: Option<NodeId>,
    ) -> MathResult<NodeId> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(MathError::Usage(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(MathError::Usage(format!("{op:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> MathResult<NodeId> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> MathResult<NodeId> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> MathResult<NodeId> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn exp(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.unary(Elementwise::Log, a)
    }

    pub fn relu(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn square(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.unary(Elementwise::Square, a)
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId) -> MathResult<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Broadcast::None);
        }
        if let ([m, n], [1, n2]) = (sa, sb) {
            if n == n2 && *m > 1 {
                return Ok(Broadcast::RowsOfB);
            }
        }
        if let ([1, n], [m, n2]) = (sa, sb) {
            if n == n2 && *m > 1 {
                return Ok(Broadcast::RowsOfA);
            }
        }
        Err(MathError::Dimension(format!(
            "cannot broadcast {sa:?} with {sb:?}"
        )))
    }

    fn binary(&mut self, op: Elementwise, a: NodeId, b: NodeId) -> MathResult<NodeId> {
        let bc = self.broadcast_kind(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let f = |x: f64, y: f64| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
            _ => unreachable!(),
        };
        let (shape, data) = match bc {
            Broadcast::None => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::RowsOfB => {
                let n = vb.len();
                (
                    va.shape().to_vec(),
                    va.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, vb.data()[i % n]))
                        .collect(),
                )
            }
            Broadcast::RowsOfA => {
                let n = va.len();
                (
                    vb.shape().to_vec(),
                    vb.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(va.data()[i % n], y))
                        .collect(),
                )
            }
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Binary(op, a, b, bc), value, rg))
    }

    fn unary(&mut self, op: Elementwise, a: NodeId) -> MathResult<NodeId> {
        let va = self.value(a);
        if op == Elementwise::Log {
            if let Some(bad) = va.data().iter().find(|&&v| v <= 0.0) {
                return Err(MathError::Domain(format!("log of non-positive entry {bad}")));
            }
        }
        let data = va
            .data()
            .iter()
            .map(|&x| match op {
                Elementwise::Exp => x.exp(),
                Elementwise::Log => x.ln(),
                Elementwise::Relu => x.max(0.0),
                Elementwise::Sigmoid => sigmoid(x),
                Elementwise::Tanh => x.tanh(),
                Elementwise::Square => x * x,
                _ => unreachable!(),
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Unary(op, a), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> MathResult<NodeId> {
        let value = self.value(a).map(|x| x * c)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Scale(a, c), value, rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> MathResult<NodeId> {
        let value = self.value(a).map(|x| x + c)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::AddScalar(a), value, rg))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> MathResult<NodeId> {
        let value = self.value(a).map(|x| x.clamp(lo, hi))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Clamp(a, lo, hi), value, rg))
    }

    pub fn reduce(
        &mut self,
        op: Reduction,
        a: NodeId,
        axis: Option<usize>,
    ) -> MathResult<NodeId> {
        let va = self.value(a);
        let value = match axis {
            None => {
                let s: f64 = va.data().iter().sum();
                let v = match op {
                    Reduction::Sum => s,
                    Reduction::Mean => s / va.len() as f64,
                };
                Tensor::new(vec![1], vec![v])?
            }
            Some(ax) => {
                if ax >= va.rank() {
                    return Err(MathError::Dimension(format!(
                        "axis {ax} out of range for shape {:?}",
                        va.shape()
                    )));
                }
                let (outer, len, inner) = axis_strides(va.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &va.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if op == Reduction::Mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape: Vec<usize> = va.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor::new(shape, out)?
            }
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reduce(op, a, axis), value, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: NodeId) -> MathResult<NodeId> {
        self.reduce(Reduction::Mean, a, None)
    }

    /// Softmax along the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> MathResult<NodeId> {
        let va = self.value(a);
        let n = *va.shape().last().expect("non-empty shape");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SoftmaxRows(a), value, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> MathResult<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> MathResult<NodeId> {
        let (m, n) = self.matrix_dims(a)?;
        if start >= end || end > n {
            return Err(MathError::Dimension(format!(
                "column slice {start}..{end} of a matrix with {n} columns"
            )));
        }
        let va = self.value(a);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&va.row(i)[start..end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SliceCols(a, start, end), value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> MathResult<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| MathError::Usage("concat of zero tensors".into()))?;
        let (m, _) = self.matrix_dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.matrix_dims(p)?;
            if mi != m {
                return Err(MathError::Dimension(format!(
                    "concat of {:?} with {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    pub fn custom(&mut self, kernel: Arc<dyn Kernel>, inputs: &[NodeId]) -> MathResult<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let (value, saved) = kernel.forward(&vals)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(Op::Custom(kernel, inputs.to_vec(), saved), value, rg))
    }

    /// Reverse sweep from a scalar `root`. Previous gradients are discarded.
    pub fn backward(&mut self, root: NodeId) -> MathResult<()> {
        if !self.value(root).is_scalar() {
            return Err(MathError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(MathError::NonFinite(format!(
                        "gradient of node {idx} is not finite"
                    )));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> MathResult<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2()?;
                let (_, n) = vb.dims2()?;
                if self.requires_grad(*a) {
                    accumulate(grads, *a, matmul_nt_raw(g, vb.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, matmul_tn_raw(va.data(), g, m, k, n));
                }
            }
            Op::Binary(op, a, b, bc) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let at = |t: &Tensor, i: usize| t.data()[i % t.len()];
                let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                    Elementwise::Add => (g.to_vec(), g.to_vec()),
                    Elementwise::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Elementwise::Mul => (
                        g.iter().enumerate().map(|(i, gv)| gv * at(vb, i)).collect(),
                        g.iter().enumerate().map(|(i, gv)| gv * at(va, i)).collect(),
                    ),
                    _ => unreachable!(),
                };
                let (ga, gb) = match bc {
                    Broadcast::None => (ga, gb),
                    Broadcast::RowsOfB => (ga, fold_rows(&gb, vb.len())),
                    Broadcast::RowsOfA => (fold_rows(&ga, va.len()), gb),
                };
                if self.requires_grad(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| {
                        g[i] * match op {
                            Elementwise::Exp => y[i],
                            Elementwise::Log => 1.0 / x[i],
                            Elementwise::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Sigmoid => y[i] * (1.0 - y[i]),
                            Elementwise::Tanh => 1.0 - y[i] * y[i],
                            Elementwise::Square => 2.0 * x[i],
                            _ => unreachable!(),
                        }
                    })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > *lo && xv < *hi { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Reduce(op, a, axis) => {
                let va = self.value(*a);
                let ga = match axis {
                    None => {
                        let s = match op {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / va.len() as f64,
                        };
                        vec![s; va.len()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_strides(va.shape(), *ax);
                        let scale = match op {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / len as f64,
                        };
                        let mut ga = vec![0.0; va.len()];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    ga[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        ga
                    }
                };
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let n = *out.shape().last().expect("non-empty shape");
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = self.value(*a).dims2()?;
                let w = end - start;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Custom(kernel, inputs, saved) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = kernel.backward(&vals, out, saved, g)?;
                for (&inp, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if self.requires_grad(inp) {
                            if gi.len() != self.value(inp).len() {
                                return Err(MathError::Dimension(format!(
                                    "kernel {} returned a gradient of length {} for an input of length {}",
                                    kernel.name(),
                                    gi.len(),
                                    self.value(inp).len()
                                )));
                            }
                            accumulate(grads, inp, gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums an m×n gradient over its rows into length n.
fn fold_rows(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln Σ exp(v)` with max subtraction.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
