use std::cell::{Cell, Ref, RefCell};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inputs to `log` are clamped from below at this value.
pub const LOG_FLOOR: f64 = 1e-12;
pub const LEAKY_SLOPE: f64 = 0.2;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    LeakyRelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Reduce {
        kind: Reduce,
        src: NodeId,
        axis: Option<usize>,
    },
    AddBias(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    Clamp {
        src: NodeId,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are only ever pushed, so every node's parents precede it. A tape
/// supports a single `backward` call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var<'_>) -> Result<&Tensor> {
        self.grads
            .get(var.id)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Contract(format!("node {} is not a leaf", var.id)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    /// A differentiable input (network parameter or probe input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn node_value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = first.shape()[0];
        let (value, requires) = {
            let nodes = self.nodes.borrow();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rank() != 2 || v.shape()[0] != rows {
                    return Err(Error::dim("concat_cols", first.shape().as_slice(), v.shape()));
                }
                widths.push(v.shape()[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            let requires = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::from_parts(vec![rows, total], data), requires)
        };
        Ok(self.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            requires,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Contract("loss is detached from every leaf".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }

        let mut out = vec![None; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                out[id] = Some(
                    grads[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                );
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Folds an elementwise gradient onto an operand that may have been a
/// broadcast scalar.
fn unbroadcast(g: Tensor, operand: &Tensor) -> Tensor {
    if g.len() == operand.len() {
        Tensor::from_parts(operand.shape().to_vec(), g.into_data())
    } else {
        Tensor::from_parts(operand.shape().to_vec(), vec![g.sum()])
    }
}

fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| &nodes[id].value;
    let live = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if live(*a) {
                let bt = kernels::transpose(bv.data(), k, n);
                let da = kernels::matmul(g.data(), &bt, m, n, k);
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
            }
            if live(*b) {
                let at = kernels::transpose(av.data(), m, k);
                let db = kernels::matmul(&at, g.data(), k, m, n);
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            let da = kernels::transpose(g.data(), n, m);
            accumulate(grads, *a, Tensor::from_parts(vec![m, n], da));
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = g.len();
            let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
            if live(*a) {
                let da: Vec<f64> = match kind {
                    BinaryOp::Add | BinaryOp::Sub => g.data().to_vec(),
                    BinaryOp::Mul => (0..n).map(|i| g.data()[i] * at(bv, i)).collect(),
                };
                let da = Tensor::from_parts(g.shape().to_vec(), da);
                accumulate(grads, *a, unbroadcast(da, av));
            }
            if live(*b) {
                let db: Vec<f64> = match kind {
                    BinaryOp::Add => g.data().to_vec(),
                    BinaryOp::Sub => g.data().iter().map(|v| -v).collect(),
                    BinaryOp::Mul => (0..n).map(|i| g.data()[i] * at(av, i)).collect(),
                };
                let db = Tensor::from_parts(g.shape().to_vec(), db);
                accumulate(grads, *b, unbroadcast(db, bv));
            }
        }
        Op::Unary(kind, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            let gd = g.data();
            let da: Vec<f64> = match kind {
                UnaryOp::Neg => gd.iter().map(|v| -v).collect(),
                UnaryOp::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryOp::Log => gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                    .collect(),
                UnaryOp::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                UnaryOp::Relu => gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                UnaryOp::LeakyRelu => gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { LEAKY_SLOPE * g })
                    .collect(),
                UnaryOp::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            };
            accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
        }
        Op::Reduce { kind, src, axis } => {
            let sv = val(*src);
            let da = match axis {
                None => {
                    let scale = match kind {
                        Reduce::Sum => 1.0,
                        Reduce::Mean => 1.0 / sv.len() as f64,
                    };
                    Tensor::full(sv.shape(), g.data()[0] * scale)
                }
                Some(ax) => {
                    let (outer, len, inner) = reduce_dims(sv.shape(), *ax);
                    let scale = match kind {
                        Reduce::Sum => 1.0,
                        Reduce::Mean => 1.0 / len as f64,
                    };
                    let mut d = vec![0.0; sv.len()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                    Tensor::from_parts(sv.shape().to_vec(), d)
                }
            };
            accumulate(grads, *src, da);
        }
        Op::AddBias(a, b) => {
            if live(*a) {
                accumulate(grads, *a, g.clone());
            }
            if live(*b) {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.shape()[0];
            let total = g.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if live(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::from_parts(vec![rows, w], d));
                }
                offset += w;
            }
        }
        Op::SliceCols { src, start } => {
            let sv = val(*src);
            let (rows, cols) = (sv.shape()[0], sv.shape()[1]);
            let w = g.shape()[1];
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            accumulate(grads, *src, Tensor::from_parts(vec![rows, cols], d));
        }
        Op::Clamp { src, lo, hi } => {
            let x = val(*src).data();
            let d = g
                .data()
                .iter()
                .zip(x)
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, *src, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::SoftmaxRows(src) => {
            let y = &node.value;
            let cols = y.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    d[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            accumulate(grads, *src, Tensor::from_parts(y.shape().to_vec(), d));
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.max(LOG_FLOOR).ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            UnaryOp::Sigmoid => sigmoid(x),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.node_value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.node_value(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_value(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Same value, cut from the tape: nothing upstream receives gradient
    /// through the result.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let (a, b) = (self.tape.node_value(self.id), self.tape.node_value(other.id));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.node_value(self.id);
            if a.rank() != 2 {
                return Err(Error::dim("transpose", a.shape(), &[]));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(vec![n, m], kernels::transpose(a.data(), m, n))
        };
        Ok(self.tape.push(value, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single element.
    pub fn binary(&self, op: BinaryOp, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let (a, b) = (self.tape.node_value(self.id), self.tape.node_value(other.id));
            let f = |x: f64, y: f64| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            };
            if a.shape() == b.shape() {
                let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            } else if b.len() == 1 {
                let y = b.data()[0];
                Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
            } else if a.len() == 1 {
                let x = a.data()[0];
                Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
            } else {
                return Err(Error::dim("elementwise", a.shape(), b.shape()));
            }
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Binary(op, self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let c = self.tape.scalar(c);
        self.mul(&c).expect("scalar broadcast")
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let c = self.tape.scalar(c);
        self.add(&c).expect("scalar broadcast")
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Var<'t> {
        let c = self.tape.scalar(c);
        c.sub(self).expect("scalar broadcast")
    }

    pub fn unary(&self, op: UnaryOp) -> Var<'t> {
        let value = self.tape.node_value(self.id).map(|x| op.eval(x));
        self.tape.push(value, Op::Unary(op, self.id), self.requires_grad())
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryOp::Exp)
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn log(&self) -> Var<'t> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryOp::Relu)
    }

    pub fn leaky_relu(&self) -> Var<'t> {
        self.unary(UnaryOp::LeakyRelu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn reduce(&self, kind: Reduce, axis: Option<usize>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.node_value(self.id);
            match axis {
                None => {
                    let s = a.sum();
                    let v = match kind {
                        Reduce::Sum => s,
                        Reduce::Mean => s / a.len() as f64,
                    };
                    Tensor::scalar(v)
                }
                Some(ax) => {
                    if ax >= a.rank() {
                        return Err(Error::dim("reduce", a.shape(), &[ax]));
                    }
                    let (outer, len, inner) = reduce_dims(a.shape(), ax);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += a.data()[(o * len + l) * inner + i];
                            }
                        }
                    }
                    if kind == Reduce::Mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = a.shape().to_vec();
                    shape.remove(ax);
                    Tensor::from_parts(shape, out)
                }
            }
        };
        Ok(self.tape.push(
            value,
            Op::Reduce {
                kind,
                src: self.id,
                axis,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        self.reduce(Reduce::Sum, None).expect("full reduction")
    }

    pub fn mean(&self) -> Var<'t> {
        self.reduce(Reduce::Mean, None).expect("full reduction")
    }

    /// `self[m,n] + bias[n]` added to every row.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let value = {
            let (a, b) = (self.tape.node_value(self.id), self.tape.node_value(bias.id));
            if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("add_bias", a.shape(), b.shape()));
            }
            let n = b.len();
            let mut d = a.data().to_vec();
            for row in d.chunks_mut(n) {
                for (x, bv) in row.iter_mut().zip(b.data()) {
                    *x += bv;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), d)
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.node_value(self.id);
            if a.rank() != 2 || start > end || end > a.shape()[1] {
                return Err(Error::dim("slice_cols", a.shape(), &[start, end]));
            }
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let w = end - start;
            let mut d = Vec::with_capacity(rows * w);
            for r in 0..rows {
                d.extend_from_slice(&a.data()[r * cols + start..r * cols + end]);
            }
            Tensor::from_parts(vec![rows, w], d)
        };
        Ok(self.tape.push(
            value,
            Op::SliceCols {
                src: self.id,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let value = self.tape.node_value(self.id).map(|x| x.clamp(lo, hi));
        self.tape.push(
            value,
            Op::Clamp {
                src: self.id,
                lo,
                hi,
            },
            self.requires_grad(),
        )
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.node_value(self.id);
            if a.rank() != 2 {
                return Err(Error::dim("softmax_rows", a.shape(), &[]));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        };
        Ok(self.tape.push(value, Op::SoftmaxRows(self.id), self.requires_grad()))
    }
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
