//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in creation
//! order, which is a valid topological order. [`Graph::backward`] walks the
//! record once in reverse and accumulates gradients; a value feeding several
//! consumers receives the sum of their contributions.
//!
//! Learned tensors live outside the graph as [`Parameter`]s. They are copied
//! in with [`Graph::param`] and receive their gradients back through
//! [`Parameter::accumulate_grad`] once `backward` has run. The graph is
//! rebuilt for every forward pass.
//!
//! ```
//! use setgan::autodiff::Graph;
//! use setgan::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Process-unique identity of a [`Parameter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named learned tensor together with its accumulated gradient.
///
/// Non-trainable state (batch-norm running statistics) is also stored as a
/// `Parameter` with `trainable == false` so it travels with checkpoints.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    /// Initialization scheme, echoed into checkpoints.
    pub init: String,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, init: impl Into<String>) -> Self {
        Parameter {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            init: init.into(),
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            trainable: false,
            ..Parameter::new(name, value, "buffer")
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Adds this parameter's gradient from `graph` into `self.grad`.
    ///
    /// Returns `false` when the parameter did not take part in the graph or
    /// received no gradient.
    pub fn accumulate_grad(&mut self, graph: &Graph) -> bool {
        let Some(g) = graph.param_grad(self.id) else {
            return false;
        };
        match &mut self.grad {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.grad = Some(
                    Tensor::new(self.value.shape().to_vec(), g.to_vec())
                        .expect("gradient mirrors parameter shape"),
                );
            }
        }
        true
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// A differentiable primitive implemented outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product. Returns one gradient per input, `None` for
    /// inputs with `needs[i] == false`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// How the right operand of a binary op is broadcast over the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand spans the last axis of the left and repeats per row.
    Row(usize),
    Scalar,
}

#[derive(Clone, Copy, Debug)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var, Broadcast),
    Unary(UnaryOp, Var),
    Reduce(ReduceOp, Var, AxisLayout, Option<Vec<usize>>),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Op::Leaf => "leaf",
            Op::Param(id) => return write!(f, "param({})", id.0),
            Op::MatMul(..) => "matmul",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::Reduce(..) => "reduce",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Reshape(_) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Custom(_, op) => op.name(),
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape: the ordered record of primitives of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    frozen: bool,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// While frozen, [`Graph::param`] records parameters as constants.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (inputs of gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `p` on the tape. Registering the same parameter twice returns
    /// the first handle so that gradients from every use are summed.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let rg = p.trainable && !self.frozen;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(p.id),
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    // ------------------------------------------------------------------
    // primitives

    /// Matrix product of `a: [m, p]` and `b: [p, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            p,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn broadcast_of(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Ok(Broadcast::Scalar);
        }
        let last = *sa.last().expect("rank >= 1");
        let row_like = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
        if row_like && nb == last {
            return Ok(Broadcast::Row(last));
        }
        Err(Error::dim(op, format!("{sa:?} vs {sb:?}")))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let bc = self.broadcast_of(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (xa, xb) = (ta.data(), tb.data());
        if op == BinaryOp::Div && xb.contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let out = match op {
            BinaryOp::Add => broadcast_map(xa, xb, bc, |x, y| x + y),
            BinaryOp::Sub => broadcast_map(xa, xb, bc, |x, y| x - y),
            BinaryOp::Mul => broadcast_map(xa, xb, bc, |x, y| x * y),
            BinaryOp::Div => broadcast_map(xa, xb, bc, |x, y| x / y),
        };
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Binary(op, a, b, bc), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.data();
        let name = unary_name(op);
        let out: Vec<f64> = match op {
            UnaryOp::Neg => d.iter().map(|v| -v).collect(),
            UnaryOp::Exp => d.iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = d.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::domain("log", format!("non-positive input {bad}")));
                }
                d.iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Sqrt => {
                if let Some(bad) = d.iter().find(|&&v| v < 0.0) {
                    return Err(Error::domain("sqrt", format!("negative input {bad}")));
                }
                d.iter().map(|v| v.sqrt()).collect()
            }
            UnaryOp::Square => d.iter().map(|v| v * v).collect(),
            UnaryOp::Abs => d.iter().map(|v| v.abs()).collect(),
            UnaryOp::Sigmoid => d.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Tanh => d.iter().map(|v| v.tanh()).collect(),
            UnaryOp::Relu => d.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryOp::LeakyRelu(s) => d.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
            UnaryOp::Scale(c) => d.iter().map(|v| c * v).collect(),
            UnaryOp::AddScalar(c) => d.iter().map(|v| c + v).collect(),
            UnaryOp::Clamp(lo, hi) => d.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::Unary(op, x), rg, name)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(slope), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryOp::Clamp(lo, hi), x)
    }

    /// Reduces `axis` away. A rank-1 input yields shape `[1]`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain(
                "reduce",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let lay = AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        };
        let d = self.value(x).data();
        let mut out = vec![0.0; lay.outer * lay.inner];
        let mut arg = None;
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..lay.outer {
                    for j in 0..lay.len {
                        let base = (o * lay.len + j) * lay.inner;
                        let dst = &mut out[o * lay.inner..(o + 1) * lay.inner];
                        for (acc, v) in dst.iter_mut().zip(&d[base..base + lay.inner]) {
                            *acc += v;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let inv = 1.0 / lay.len as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceOp::Max => {
                let mut idx = vec![0usize; out.len()];
                for o in 0..lay.outer {
                    for i in 0..lay.inner {
                        let mut best = d[o * lay.len * lay.inner + i];
                        let mut bj = 0;
                        for j in 1..lay.len {
                            let v = d[(o * lay.len + j) * lay.inner + i];
                            // strict comparison keeps the first maximal index
                            if v > best {
                                best = v;
                                bj = j;
                            }
                        }
                        out[o * lay.inner + i] = best;
                        idx[o * lay.inner + i] = bj;
                    }
                }
                arg = Some(idx);
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce(op, x, lay, arg),
            rg,
            "reduce",
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Max, x, axis)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg, "mean_all")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Selects rows (first-axis slices) by index; repeated indices allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows(x, idx.to_vec()),
            rg,
            "gather_rows",
        )
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("{start}..{end} of {} rows", t.rows()),
            ));
        }
        let c = t.cols();
        let out = t.data()[start * c..end * c].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::SliceRows(x, start), rg, "slice_rows")
    }

    /// Concatenates 2-D tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let rows = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", format!("{s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(xs.to_vec()),
            rg,
            "concat_cols",
        )
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let ts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&ts)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let name = op.name();
        self.push(out, Op::Custom(inputs.to_vec(), op), rg, name)
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Accumulates d`loss`/d`v` for every recorded value `v` that requires a
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without reset_grads"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, p, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let buf = grad_buf(grads, *a, m * p);
                    gemm(m, n, p, g, false, tb.data(), true, buf, 1.0);
                }
                if needs(*b) {
                    let buf = grad_buf(grads, *b, p * n);
                    gemm(p, m, n, ta.data(), true, g, false, buf, 1.0);
                }
            }
            Op::Binary(op, a, b, bc) => {
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if needs(*a) {
                    let buf = grad_buf(grads, *a, xa.len());
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                        }
                        BinaryOp::Mul => broadcast_accumulate(buf, g, xb, *bc, |gk, y| gk * y),
                        BinaryOp::Div => broadcast_accumulate(buf, g, xb, *bc, |gk, y| gk / y),
                    }
                }
                if needs(*b) {
                    let buf = grad_buf(grads, *b, xb.len());
                    match op {
                        BinaryOp::Add => reduce_into(buf, g, *bc, |_, gk| gk),
                        BinaryOp::Sub => reduce_into(buf, g, *bc, |_, gk| -gk),
                        BinaryOp::Mul => reduce_into(buf, g, *bc, |k, gk| gk * xa[k]),
                        BinaryOp::Div => {
                            let mut t = vec![0.0; xb.len()];
                            reduce_into(&mut t, g, *bc, |k, gk| gk * xa[k]);
                            for ((d, s), y) in buf.iter_mut().zip(&t).zip(xb) {
                                *d -= s / (y * y);
                            }
                        }
                    }
                }
            }
            Op::Unary(op, x) => {
                if !needs(*x) {
                    return;
                }
                let xs = nodes[x.0].value.data();
                let ys = node.value.data();
                let buf = grad_buf(grads, *x, xs.len());
                match *op {
                    UnaryOp::Neg => accumulate(buf, xs, ys, g, |_, _, gk| -gk),
                    UnaryOp::Exp => accumulate(buf, xs, ys, g, |_, yv, gk| gk * yv),
                    UnaryOp::Log => accumulate(buf, xs, ys, g, |xv, _, gk| gk / xv),
                    UnaryOp::Sqrt => accumulate(buf, xs, ys, g, |_, yv, gk| 0.5 * gk / yv),
                    UnaryOp::Square => accumulate(buf, xs, ys, g, |xv, _, gk| 2.0 * xv * gk),
                    UnaryOp::Abs => accumulate(buf, xs, ys, g, |xv, _, gk| {
                        if xv > 0.0 {
                            gk
                        } else if xv < 0.0 {
                            -gk
                        } else {
                            0.0
                        }
                    }),
                    UnaryOp::Sigmoid => accumulate(buf, xs, ys, g, |_, yv, gk| gk * yv * (1.0 - yv)),
                    UnaryOp::Tanh => accumulate(buf, xs, ys, g, |_, yv, gk| gk * (1.0 - yv * yv)),
                    UnaryOp::Relu => accumulate(buf, xs, ys, g, |xv, _, gk| if xv > 0.0 { gk } else { 0.0 }),
                    UnaryOp::LeakyRelu(s) => accumulate(buf, xs, ys, g, |xv, _, gk| if xv > 0.0 { gk } else { s * gk }),
                    UnaryOp::Scale(c) => accumulate(buf, xs, ys, g, |_, _, gk| c * gk),
                    UnaryOp::AddScalar(_) => accumulate(buf, xs, ys, g, |_, _, gk| gk),
                    UnaryOp::Clamp(lo, hi) => accumulate(buf, xs, ys, g, |xv, _, gk| if xv >= lo && xv <= hi { gk } else { 0.0 }),
                }
            }
            Op::Reduce(op, x, lay, arg) => {
                if !needs(*x) {
                    return;
                }
                let n = nodes[x.0].value.numel();
                let buf = grad_buf(grads, *x, n);
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s = if *op == ReduceOp::Mean {
                            1.0 / lay.len as f64
                        } else {
                            1.0
                        };
                        for o in 0..lay.outer {
                            let src = &g[o * lay.inner..(o + 1) * lay.inner];
                            for j in 0..lay.len {
                                let base = (o * lay.len + j) * lay.inner;
                                for (d, v) in buf[base..base + lay.inner].iter_mut().zip(src) {
                                    *d += s * v;
                                }
                            }
                        }
                    }
                    ReduceOp::Max => {
                        let arg = arg.as_ref().expect("max records argmax");
                        for o in 0..lay.outer {
                            for ii in 0..lay.inner {
                                let k = o * lay.inner + ii;
                                buf[(o * lay.len + arg[k]) * lay.inner + ii] += g[k];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if !needs(*x) {
                    return;
                }
                let n = nodes[x.0].value.numel();
                let s = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                grad_buf(grads, *x, n).iter_mut().for_each(|d| *d += s);
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    let buf = grad_buf(grads, *x, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::GatherRows(x, idx) => {
                if !needs(*x) {
                    return;
                }
                let t = &nodes[x.0].value;
                let c = t.cols();
                let buf = grad_buf(grads, *x, t.numel());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut buf[src * c..(src + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
            }
            Op::SliceRows(x, start) => {
                if !needs(*x) {
                    return;
                }
                let t = &nodes[x.0].value;
                let off = start * t.cols();
                let buf = grad_buf(grads, *x, t.numel());
                for (d, s) in buf[off..off + g.len()].iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &x in xs {
                    let w = nodes[x.0].value.cols();
                    if needs(x) {
                        let buf = grad_buf(grads, x, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            for (d, s) in buf[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Custom(inputs, op) => {
                let ts: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let need: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                let contribs = op.backward(&ts, &node.value, g, &need);
                for ((&v, c), &nd) in inputs.iter().zip(contribs).zip(&need) {
                    if let (true, Some(c)) = (nd, c) {
                        match &mut grads[v.0] {
                            Some(buf) => buf.iter_mut().zip(&c).for_each(|(d, s)| *d += s),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
        }
    }
}

/// Elementwise `f(a, b)` with `b` broadcast over `a`.
fn broadcast_map(xa: &[f64], xb: &[f64], bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Broadcast::Same => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => xa.iter().map(|&x| f(x, xb[0])).collect(),
        Broadcast::Row(_) => {
            let mut out = Vec::with_capacity(xa.len());
            for row in xa.chunks_exact(xb.len()) {
                out.extend(row.iter().zip(xb).map(|(&x, &y)| f(x, y)));
            }
            out
        }
    }
}

/// `buf[k] += f(g[k], b[k])` with `b` broadcast over the left operand.
fn broadcast_accumulate(buf: &mut [f64], g: &[f64], xb: &[f64], bc: Broadcast, f: impl Fn(f64, f64) -> f64) {
    match bc {
        Broadcast::Same => buf.iter_mut().zip(g).zip(xb).for_each(|((d, &gk), &y)| *d += f(gk, y)),
        Broadcast::Scalar => buf.iter_mut().zip(g).for_each(|(d, &gk)| *d += f(gk, xb[0])),
        Broadcast::Row(n) => {
            for (bd, gd) in buf.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                bd.iter_mut().zip(gd).zip(xb).for_each(|((d, &gk), &y)| *d += f(gk, y));
            }
        }
    }
}

/// Sums `f(k, g[k])` into the broadcast operand's gradient.
fn reduce_into(buf: &mut [f64], g: &[f64], bc: Broadcast, f: impl Fn(usize, f64) -> f64) {
    match bc {
        Broadcast::Same => buf.iter_mut().zip(g).enumerate().for_each(|(k, (d, &gk))| *d += f(k, gk)),
        Broadcast::Scalar => buf[0] += g.iter().enumerate().map(|(k, &gk)| f(k, gk)).sum::<f64>(),
        Broadcast::Row(n) => {
            for (r, gd) in g.chunks_exact(n).enumerate() {
                for ((j, d), &gk) in buf.iter_mut().enumerate().zip(gd) {
                    *d += f(r * n + j, gk);
                }
            }
        }
    }
}

fn accumulate(buf: &mut [f64], xs: &[f64], ys: &[f64], g: &[f64], f: impl Fn(f64, f64, f64) -> f64) {
    for (((d, &xv), &yv), &gk) in buf.iter_mut().zip(xs).zip(ys).zip(g) {
        *d += f(xv, yv, gk);
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Neg => "neg",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Square => "square",
        UnaryOp::Abs => "abs",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Relu => "relu",
        UnaryOp::LeakyRelu(_) => "leaky_relu",
        UnaryOp::Scale(_) => "scale",
        UnaryOp::AddScalar(_) => "add_scalar",
        UnaryOp::Clamp(..) => "clamp",
    }
}

/// Logistic function evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
