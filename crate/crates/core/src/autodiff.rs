//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a dynamic tape: every forward operation appends a node whose
//! inputs are already on the tape, so node order is a topological order and
//! the backward pass is a single reverse sweep. Graphs are rebuilt for every
//! forward pass, which is what variable-length sequences and per-step
//! permutations need.
//!
//! Elementwise binary ops accept operands of identical shape, or a one-element
//! tensor against any tensor. There is no other broadcasting; adding a bias
//! row to a batch goes through the explicit [`Graph::add_bias`] op.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were given")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Size of the last axis (1 for rank-0 tensors).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    /// Concatenation along the last axis.
    Concat,
    /// Half-open range `start..end` of the last axis.
    Slice {
        start: usize,
        end: usize,
    },
    Sum,
    Mean,
    Square,
    Abs,
    /// `[.., n] + [n]`, the bias row repeated over leading axes.
    AddBias,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Concat(Vec<usize>),
    Slice { input: usize, start: usize, end: usize },
    Sum(usize),
    Mean(usize),
    Square(usize),
    Abs(usize),
    AddBias(usize, usize),
    GatherRows { table: usize, rows: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Tanh(a) | Op::Sigmoid(a) | Op::Sum(a) | Op::Mean(a) | Op::Square(a) | Op::Abs(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    // some trainable leaf feeds this node
    live: bool,
}

/// Dynamic tape of operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it collects gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, tensor)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// A trainable leaf. Any existing gradient on `tensor` is dropped.
    pub fn param(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.grad = None;
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let live = match &op {
            Op::Leaf => value.requires_grad,
            other => other.inputs().iter().any(|&i| self.nodes[i].live),
        };
        self.nodes.push(Node { op, value, live });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::InvalidArgument {
                op: "graph",
                msg: format!("node {} is not on this tape", id.0),
            })
        }
    }

    /// Generic entry point; the named methods below are thin wrappers.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            self.check(id)?;
        }
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::InvalidArgument {
                    op: "forward_op",
                    msg: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul_impl(inputs[0], inputs[1])
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2)?;
                self.binary_impl(kind, inputs[0], inputs[1])
            }
            OpKind::Tanh | OpKind::Sigmoid | OpKind::Square | OpKind::Abs => {
                arity(1)?;
                Ok(self.unary_impl(kind, inputs[0]))
            }
            OpKind::Sum | OpKind::Mean => {
                arity(1)?;
                Ok(self.reduce_impl(kind, inputs[0]))
            }
            OpKind::Concat => self.concat_impl(inputs),
            OpKind::Slice { start, end } => {
                arity(1)?;
                self.slice_impl(inputs[0], start, end)
            }
            OpKind::AddBias => {
                arity(2)?;
                self.add_bias_impl(inputs[0], inputs[1])
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Square, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Abs, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.forward_op(OpKind::Concat, parts)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Slice { start, end }, &[a])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::AddBias, &[a, bias])
    }

    /// Rows of a `[V, w]` table, `[rows.len(), w]`; repeats are allowed and
    /// their gradients add up.
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(table)?;
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("table must be 2-D, got {:?}", t.shape),
            });
        }
        let (v, w) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} outside a table of {v} rows"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
        }
        let value = Tensor::new(vec![rows.len(), w], data)?;
        Ok(self.push(
            Op::GatherRows {
                table: table.0,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    /// Left-to-right sum of same-shaped nodes.
    pub fn add_all(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = parts.split_first().ok_or(AutodiffError::InvalidArgument {
            op: "add_all",
            msg: "no operands".into(),
        })?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a.0, b.0), value))
    }

    fn binary_impl(&mut self, kind: OpKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match kind {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            _ => "mul",
        };
        let shape = broadcast_shape(name, ta, tb)?;
        let f: fn(f64, f64) -> f64 = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let data = zip_broadcast(ta.data(), tb.data(), f);
        let value = Tensor::new(shape, data)?;
        let op = match kind {
            OpKind::Add => Op::Add(a.0, b.0),
            OpKind::Sub => Op::Sub(a.0, b.0),
            _ => Op::Mul(a.0, b.0),
        };
        Ok(self.push(op, value))
    }

    fn unary_impl(&mut self, kind: OpKind, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            OpKind::Tanh => tanh,
            OpKind::Sigmoid => sigmoid,
            OpKind::Square => |x| x * x,
            _ => f64::abs,
        };
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        };
        let op = match kind {
            OpKind::Tanh => Op::Tanh(a.0),
            OpKind::Sigmoid => Op::Sigmoid(a.0),
            OpKind::Square => Op::Square(a.0),
            _ => Op::Abs(a.0),
        };
        self.push(op, value)
    }

    fn reduce_impl(&mut self, kind: OpKind, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let total: f64 = ta.data.iter().sum();
        let (v, op) = match kind {
            OpKind::Sum => (total, Op::Sum(a.0)),
            _ => (total / ta.numel().max(1) as f64, Op::Mean(a.0)),
        };
        self.push(op, Tensor::scalar(v))
    }

    fn concat_impl(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let lead_shape = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead_shape.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: self.value(*first).shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let w = t.last_dim();
                data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(width);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), value))
    }

    fn slice_impl(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let w = ta.last_dim();
        if ta.shape.is_empty() || start >= end || end > w {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} invalid for shape {:?}", ta.shape),
            });
        }
        let rows = ta.numel() / w;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * w + start..r * w + end]);
        }
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Slice { input: a.0, start, end }, value))
    }

    fn add_bias_impl(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let w = ta.last_dim();
        if ta.shape.is_empty() || tb.shape.len() != 1 || tb.shape[0] != w {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(w) {
            row.iter_mut().zip(&tb.data).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(Op::AddBias(a.0, bias.0), value))
    }

    /// Back-propagates from a one-element `loss`, adding `d loss / d leaf`
    /// into every leaf created with `requires_grad`. Calling it again adds
    /// again; use [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 || loss_value.shape.len() > 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad && node.value.grad.is_none() {
                    node.value.grad = Some(vec![0.0; node.value.numel()]);
                }
                continue;
            };
            if !self.nodes[i].live {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    if node.value.requires_grad {
                        node.value.accumulate_grad(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a].live {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, &self.nodes[b].value.data, true, &mut ga, 0.0);
                        accumulate(&mut grads[a], ga);
                    }
                    if self.nodes[b].live {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, &self.nodes[a].value.data, true, &g, false, &mut gb, 0.0);
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let na = self.nodes[a].value.numel();
                    let nb = self.nodes[b].value.numel();
                    accumulate(&mut grads[a], reduce_to(&g, na));
                    let mut gb = reduce_to(&g, nb);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads[b], gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
                    let ga = reduce_to(&zip_broadcast(&g, vb, |x, y| x * y), va.len());
                    let gb = reduce_to(&zip_broadcast(&g, va, |x, y| x * y), vb.len());
                    accumulate(&mut grads[a], ga);
                    accumulate(&mut grads[b], gb);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value.data;
                    let ga = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads[a], ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value.data;
                    let ga = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads[a], ga);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a].value.data;
                    let ga = g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads[a], ga);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a].value.data;
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[a], ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.numel();
                    accumulate(&mut grads[a], vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.numel();
                    accumulate(&mut grads[a], vec![g[0] / n.max(1) as f64; n]);
                }
                Op::Concat(parts) => {
                    let w_out = self.nodes[i].value.last_dim();
                    let rows = g.len() / w_out;
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p].value.last_dim();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * w_out + offset..r * w_out + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads[p], gp);
                    }
                }
                Op::Slice { input, start, end } => {
                    let w_in = self.nodes[input].value.last_dim();
                    let w = end - start;
                    let mut gi = vec![0.0; self.nodes[input].value.numel()];
                    for (r, row) in g.chunks(w).enumerate() {
                        gi[r * w_in + start..r * w_in + end].copy_from_slice(row);
                    }
                    accumulate(&mut grads[input], gi);
                }
                Op::AddBias(a, b) => {
                    let w = self.nodes[b].value.numel();
                    let mut gb = vec![0.0; w];
                    for row in g.chunks(w) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    accumulate(&mut grads[a], g);
                    accumulate(&mut grads[b], gb);
                }
                Op::GatherRows { table, rows } => {
                    let w = self.nodes[table].value.last_dim();
                    let mut gt = vec![0.0; self.nodes[table].value.numel()];
                    for (&r, row) in rows.iter().zip(g.chunks(w)) {
                        gt[r * w..(r + 1) * w].iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    accumulate(&mut grads[table], gt);
                }
            }
        }
        Ok(())
    }
}

// Rational approximation on the small range, exp-based elsewhere.
fn tanh(x: f64) -> f64 {
    const P: [f64; 3] = [
        -9.643_991_794_250_523e-1,
        -9.928_772_310_019_186e1,
        -1.614_687_684_417_084_5e3,
    ];
    const Q: [f64; 3] = [
        1.128_116_784_916_329_3e2,
        2.235_488_390_601_004_5e3,
        4.844_063_053_251_255e3,
    ];
    let a = x.abs();
    if a < 0.625 {
        let z = x * x;
        let p = (P[0] * z + P[1]) * z + P[2];
        let q = ((z + Q[0]) * z + Q[1]) * z + Q[2];
        x + x * z * p / q
    } else if a > 22.0 {
        x.signum()
    } else {
        let s = (2.0 * a).exp();
        (1.0 - 2.0 / (s + 1.0)).copysign(x)
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

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape || b.numel() == 1 {
        Ok(a.shape.clone())
    } else if a.numel() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
    }
}

/// Elementwise combination where either side may be a single value.
fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        (1, _) => b.iter().map(|&y| f(a[0], y)).collect(),
        _ => unreachable!("shapes validated at forward time"),
    }
}

/// Sums a gradient down to a broadcast operand's length.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        g.to_vec()
    } else {
        debug_assert_eq!(len, 1);
        vec![g.iter().sum()]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// `out = op(a)[m,k] * op(b)[k,n] + beta * out`, all row-major; a transposed
/// operand is read from storage of shape `[k,m]` (resp. `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Max relative error between autodiff gradients of `f` and central
/// differences with the given step, over every entry of every parameter.
///
/// The relative error of one entry is
/// `|autodiff - fd| / max(1e-12, |fd|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        });
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        g.value(out)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarLoss(g.value(out).shape().to_vec()))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &grad) in grads.iter().enumerate() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let rel = (grad - fd).abs() / fd.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    #[test]
    fn tanh_matches_libm() {
        let mut worst = 0.0f64;
        for i in -300_000..=300_000 {
            let x = i as f64 * 1e-4 + 1.234e-7;
            let want = x.tanh();
            let got = super::tanh(x);
            worst = worst.max(((got - want) / want).abs());
        }
        assert!(worst <= 1e-15, "worst {worst}");
        assert_eq!(super::tanh(0.0), 0.0);
        assert_eq!(super::tanh(40.0), 1.0);
        assert_eq!(super::tanh(-40.0), -1.0);
    }

    use super::*;

    #[test]
    fn tanh_at_origin() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(c).shape(), &[2, 2]);
    }

    #[test]
    fn mean_of_vector() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), Some(4.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let one = g.scalar(1.0);
        let t = g.tanh(w).unwrap();
        let l = g.mul(t, one).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let v = g.constant(Tensor::zeros(vec![4]));
        assert!(matches!(
            g.add(a, v),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let used = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![3.0]));
        let zero = g.scale(unused, 0.0).unwrap();
        let s = g.sum(used).unwrap();
        let _ = zero;
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
        assert_eq!(g.grad(used).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.param(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut g = Graph::new();
        let t = g.param(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = g.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let l = g.sum(r).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather_rows(t, &[3]).is_err());
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let params = vec![
            Tensor::vector(vec![0.5, -1.25, 2.0]),
            Tensor::matrix(2, 2, vec![0.1, 0.7, -0.3, 1.9]).unwrap(),
        ];
        let err = grad_check(
            |g, p| {
                let a = g.square(p[0])?;
                let b = g.square(p[1])?;
                let sa = g.sum(a)?;
                let sb = g.sum(b)?;
                g.add(sa, sb)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_grad_check_is_zero() {
        let params = vec![Tensor::vector(vec![1.0, 2.0])];
        let err = grad_check(|g, _| Ok(g.scalar(3.0)), &params, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_nonpositive_step() {
        let params = vec![Tensor::scalar(1.0)];
        assert!(grad_check(|g, p| g.sum(p[0]), &params, 0.0).is_err());
    }
}
