//! Define-by-run reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an arena of nodes. Every primitive appends one node holding
//! its forward value and the ids of its inputs, so node ids are already a
//! topological order. [`Graph::backward`] walks the arena once from the loss
//! down to the first node and applies each op's local gradient rule.
//!
//! Parameters live outside the graph as [`Tensor`]s and are copied in with
//! [`Graph::param`] (differentiable) or [`Graph::constant`] (not). A graph is
//! built per training step and dropped afterwards.

use std::fmt;
use std::str::FromStr;

use crate::error::{MistError, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(MistError::invalid(
                "tensor",
                format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel,
                    values.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MistError::invalid("from_rows", "ragged rows"));
        }
        let values = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    /// (rows, cols) of a rank-2 tensor; rank 1 is read as one row, rank 0 as 1x1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let (_, c) = self.dims2();
        self.values.chunks(c.max(1))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// How [`Graph::segment_pool`] reduces each segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

/// Primitive kinds, used in diagnostics and for gradient-rule fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Shift,
    Tanh,
    Relu,
    Exp,
    Log,
    Abs,
    Softmax,
    Sum,
    Mean,
    MeanAxis,
    LogSumExp,
    Concat,
    Gather,
    SegmentPool,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::Shift,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Softmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanAxis,
        OpKind::LogSumExp,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::SegmentPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::Shift => "shift",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanAxis => "mean_axis",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
            OpKind::SegmentPool => "segment_pool",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = MistError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| MistError::invalid("op", format!("unknown op {s:?}")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis(NodeId, usize),
    LogSumExp(NodeId, usize),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    SegmentPool {
        input: NodeId,
        offsets: Vec<usize>,
        kind: Pooling,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Abs(..) => OpKind::Abs,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::Concat(..) => OpKind::Concat,
            Op::Gather(..) => OpKind::Gather,
            Op::SegmentPool { .. } => OpKind::SegmentPool,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// (outer, len, inner) strides for a reduction along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Corrupts the backward rule of one primitive by scaling its upstream
    /// gradient by 1.5. Exists so the self-test can prove it catches a bad rule.
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        value.grad = None;
        value.requires_grad = inputs
            .iter()
            .any(|i| self.nodes[i.0].value.requires_grad);
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        let value = Tensor {
            shape: t.shape.clone(),
            values: t.values.clone(),
            grad: None,
            requires_grad,
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn vals(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.values
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(MistError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(MistError::invalid(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        };
        self.push(out, op, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(MistError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o += aip * bj;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let values = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), values)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.rank2("add_bias", a)?;
        if self.value(bias).numel() != c {
            return Err(MistError::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.vals(bias);
        let mut out = self.vals(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Scale(a, k), |v| v * k)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Shift(a), |v| v + k)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Softmax over the last axis, shift-stabilized per row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| MistError::invalid("softmax", "rank-0 input"))?;
        if last == 0 {
            return Err(MistError::Empty("softmax"));
        }
        let mut out = self.vals(a).to_vec();
        for row in out.chunks_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.vals(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(MistError::Empty("mean"));
        }
        let s: f64 = self.vals(a).iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), &[a]))
    }

    fn reduced_shape(&self, op: &'static str, a: NodeId, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(MistError::invalid(
                op,
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        if shape[axis] == 0 {
            return Err(MistError::Empty(op));
        }
        let mut out = shape.to_vec();
        out[axis] = 1;
        Ok(out)
    }

    /// Mean along `axis`, keeping the reduced axis with size 1.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let out_shape = self.reduced_shape("mean_axis", a, axis)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let v = self.vals(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * len + j) * inner + i];
                }
            }
        }
        for x in &mut out {
            *x /= len as f64;
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MeanAxis(a, axis), &[a]))
    }

    /// `log(sum(exp(x)))` along `axis`, keeping the reduced axis. Stable for
    /// large inputs: the per-slice maximum is factored out first.
    pub fn log_sum_exp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let out_shape = self.reduced_shape("log_sum_exp", a, axis)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let v = self.vals(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| v[(o * len + j) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|j| (at(j) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::LogSumExp(a, axis), &[a]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(MistError::Empty("concat"))?;
        let (rows, _) = self.rank2("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat", p)?;
            if r != rows {
                return Err(MistError::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.vals(p)[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Row lookup `table[idx[i]]`; embedding lookup when `table` is a codebook.
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, c) = self.rank2("gather", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(MistError::invalid(
                "gather",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let v = self.vals(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::Gather(table, idx.to_vec()), &[table]))
    }

    /// Pools consecutive row segments of a rank-2 tensor. `offsets` has one
    /// more entry than there are segments: segment `s` spans rows
    /// `offsets[s]..offsets[s + 1]`. Output is `segments x cols`.
    pub fn segment_pool(&mut self, a: NodeId, offsets: &[usize], kind: Pooling) -> Result<NodeId> {
        let (rows, c) = self.rank2("segment_pool", a)?;
        if offsets.len() < 2
            || offsets[0] != 0
            || *offsets.last().unwrap() != rows
            || offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(MistError::invalid(
                "segment_pool",
                format!("offsets {offsets:?} do not partition {rows} rows into non-empty segments"),
            ));
        }
        let v = self.vals(a);
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * c];
        let mut argmax = Vec::new();
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            for j in 0..c {
                match kind {
                    Pooling::Mean => {
                        let total: f64 = (lo..hi).map(|r| v[r * c + j]).sum();
                        out[s * c + j] = total / (hi - lo) as f64;
                    }
                    Pooling::Max => {
                        // first maximum wins ties
                        let mut best = lo;
                        for r in lo + 1..hi {
                            if v[r * c + j] > v[best * c + j] {
                                best = r;
                            }
                        }
                        out[s * c + j] = v[best * c + j];
                        argmax.push(best);
                    }
                }
            }
        }
        let t = Tensor::new(vec![segs, c], out)?;
        Ok(self.push(
            t,
            Op::SegmentPool {
                input: a,
                offsets: offsets.to_vec(),
                kind,
                argmax,
            },
            &[a],
        ))
    }

    /// Reverse pass from a one-element `loss`. Populates the gradient of every
    /// node that requires one; differentiable leaves the loss does not reach
    /// get a zero gradient. Earlier gradients are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(MistError::NonScalarLoss(loss_shape));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.value.requires_grad {
                continue;
            }
            if self.fault.is_some() && node.op.kind() == self.fault {
                for x in &mut g {
                    *x *= 1.5;
                }
            }
            self.apply_rule(id, &g, &mut grads);
            self.nodes[id].value.grad = Some(g);
        }

        for n in &mut self.nodes {
            if n.value.requires_grad && n.value.grad.is_none() {
                n.value.grad = Some(vec![0.0; n.value.numel()]);
            }
        }
        Ok(())
    }

    fn apply_rule(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.values;
        // Adds `f`'s contribution into input `x`'s gradient buffer.
        let mut acc = |x: NodeId, f: &dyn Fn(&mut [f64])| {
            let xn = &self.nodes[x.0].value;
            if !xn.requires_grad {
                return;
            }
            let buf = grads[x.0].get_or_insert_with(|| vec![0.0; xn.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &|ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            for (o, &gj) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gj;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*bias, &|gb| {
                    let c = gb.len();
                    for row in g.chunks(c.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += k * x;
                }
            }),
            Op::Shift(a) => acc(*a, &|ga| add_into(ga, g)),
            Op::Tanh(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(a) => {
                let av = self.vals(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = self.vals(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                })
            }
            Op::Abs(a) => {
                let av = self.vals(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * s;
                    }
                })
            }
            Op::Softmax(a) => {
                let last = *node.value.shape.last().unwrap();
                acc(*a, &|ga| {
                    for ((gr, sr), orow) in g
                        .chunks(last)
                        .zip(out.chunks(last))
                        .zip(ga.chunks_mut(last))
                    {
                        let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                        for j in 0..last {
                            orow[j] += sr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &|ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &|ga| {
                let k = g[0] / ga.len() as f64;
                for o in ga.iter_mut() {
                    *o += k;
                }
            }),
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                acc(*a, &|ga| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                ga[(o * len + j) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                })
            }
            Op::LogSumExp(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let av = self.vals(*a);
                acc(*a, &|ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for j in 0..len {
                                let at = (o * len + j) * inner + i;
                                ga[at] += g[r] * (av[at] - out[r]).exp();
                            }
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let (rows, total) = node.value.dims2();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    acc(p, &|gp| {
                        for r in 0..rows {
                            let src = &g[r * total + col..r * total + col + w];
                            add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                    });
                    col += w;
                }
            }
            Op::Gather(table, idx) => {
                let c = node.value.dims2().1;
                acc(*table, &|gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                })
            }
            Op::SegmentPool {
                input,
                offsets,
                kind,
                argmax,
            } => {
                let c = node.value.dims2().1;
                acc(*input, &|gi| {
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        for j in 0..c {
                            let gs = g[s * c + j];
                            match kind {
                                Pooling::Mean => {
                                    let k = gs / (hi - lo) as f64;
                                    for r in lo..hi {
                                        gi[r * c + j] += k;
                                    }
                                }
                                Pooling::Max => gi[argmax[s * c + j] * c + j] += gs,
                            }
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
