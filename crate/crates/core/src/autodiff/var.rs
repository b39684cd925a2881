//! Graph nodes and the eagerly evaluated primitive operations.

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Primitive operation kinds, as named in shape and finiteness errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    ElementwiseMul,
    Neg,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Abs,
    Square,
    Mean,
    Sum,
    Concat,
    SoftmaxOverAxis,
    Broadcast,
    SumRows,
    Expand,
    Transpose,
    Reshape,
    Slice,
    Pad,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::SoftmaxOverAxis => "softmax_over_axis",
            OpKind::Broadcast => "broadcast",
            OpKind::SumRows => "sum_rows",
            OpKind::Expand => "expand",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Slice => "slice",
            OpKind::Pad => "pad",
        };
        f.write_str(name)
    }
}

/// Which operand of a binary op, if any, is a vector broadcast along the
/// other operand's last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Neg,
    Scale(f64),
    Relu,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Abs,
    Square,
    Mean,
    Sum,
    Concat(Vec<usize>),
    Softmax,
    BroadcastRows,
    SumRows,
    Expand,
    Transpose,
    Reshape,
    Slice { start: usize },
    Pad { start: usize },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Add(_) => OpKind::Add,
            Op::Sub(_) => OpKind::Sub,
            Op::Mul(_) => OpKind::ElementwiseMul,
            Op::Neg => OpKind::Neg,
            Op::Scale(_) => OpKind::Scale,
            Op::Relu => OpKind::Relu,
            Op::Tanh => OpKind::Tanh,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Sin => OpKind::Sin,
            Op::Cos => OpKind::Cos,
            Op::Abs => OpKind::Abs,
            Op::Square => OpKind::Square,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
            Op::Concat(_) => OpKind::Concat,
            Op::Softmax => OpKind::SoftmaxOverAxis,
            Op::BroadcastRows => OpKind::Broadcast,
            Op::SumRows => OpKind::SumRows,
            Op::Expand => OpKind::Expand,
            Op::Transpose => OpKind::Transpose,
            Op::Reshape => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Pad { .. } => OpKind::Pad,
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Var>,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// A handle to an immutable graph node.
///
/// Node ids grow monotonically on each thread, and every node is created
/// after its parents, so descending id order is a topological order.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous recording mode on drop.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled; every node created is a constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

fn mismatch(op: OpKind, lhs: &Tensor, rhs: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: lhs.shape().to_vec(), rhs: rhs.shape().to_vec() }
}

fn bad_shape(op: OpKind, t: &Tensor, expected: &str) -> AutodiffError {
    AutodiffError::InvalidShape { op, shape: t.shape().to_vec(), expected: expected.to_string() }
}

fn broadcast_mode(op: OpKind, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::None)
    } else if b.rank() == 1 && a.rank() == 2 && a.last_dim() == b.len() {
        Ok(Bcast::Rhs)
    } else if a.rank() == 1 && b.rank() == 2 && b.last_dim() == a.len() {
        Ok(Bcast::Lhs)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn binary_value(a: &Tensor, b: &Tensor, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match mode {
        Bcast::None => a.zip(b, f),
        Bcast::Rhs => a.zip_rows(b, f),
        Bcast::Lhs => b.zip_rows(a, |y, x| f(x, y)),
    }
}

impl Var {
    fn make(op: Op, parents: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.kind() });
        }
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let (op, parents) = if requires_grad { (op, parents) } else { (Op::Leaf, Vec::new()) };
        Ok(Var(Rc::new(Node { id: next_id(), op, parents, value, requires_grad })))
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: OpKind::Leaf });
        }
        Ok(Var(Rc::new(Node { id: next_id(), op: Op::Leaf, parents: Vec::new(), value, requires_grad })))
    }

    /// A differentiable leaf.
    pub fn param(value: Tensor) -> Result<Var> {
        Self::leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Result<Var> {
        Self::leaf(value, false)
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn kind(&self) -> OpKind {
        self.0.op.kind()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// A constant node holding the same value.
    pub fn detach(&self) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            op: Op::Leaf,
            parents: Vec::new(),
            value: self.0.value.clone(),
            requires_grad: false,
        }))
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch(OpKind::MatMul, a, b));
        }
        Self::make(Op::MatMul, vec![self.clone(), rhs.clone()], a.matmul(b))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let mode = broadcast_mode(OpKind::Add, self.value(), rhs.value())?;
        let value = binary_value(self.value(), rhs.value(), mode, |x, y| x + y);
        Self::make(Op::Add(mode), vec![self.clone(), rhs.clone()], value)
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let mode = broadcast_mode(OpKind::Sub, self.value(), rhs.value())?;
        let value = binary_value(self.value(), rhs.value(), mode, |x, y| x - y);
        Self::make(Op::Sub(mode), vec![self.clone(), rhs.clone()], value)
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let mode = broadcast_mode(OpKind::ElementwiseMul, self.value(), rhs.value())?;
        let value = binary_value(self.value(), rhs.value(), mode, |x, y| x * y);
        Self::make(Op::Mul(mode), vec![self.clone(), rhs.clone()], value)
    }

    pub fn neg(&self) -> Result<Var> {
        Self::make(Op::Neg, vec![self.clone()], self.value().map(|v| -v))
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&self, factor: f64) -> Result<Var> {
        Self::make(Op::Scale(factor), vec![self.clone()], self.value().map(|v| v * factor))
    }

    pub fn relu(&self) -> Result<Var> {
        let value = self.value().map(|v| if v > 0.0 { v } else { 0.0 });
        Self::make(Op::Relu, vec![self.clone()], value)
    }

    pub fn tanh(&self) -> Result<Var> {
        Self::make(Op::Tanh, vec![self.clone()], self.value().map(f64::tanh))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let value = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        Self::make(Op::Sigmoid, vec![self.clone()], value)
    }

    pub fn sin(&self) -> Result<Var> {
        Self::make(Op::Sin, vec![self.clone()], self.value().map(f64::sin))
    }

    pub fn cos(&self) -> Result<Var> {
        Self::make(Op::Cos, vec![self.clone()], self.value().map(f64::cos))
    }

    pub fn abs(&self) -> Result<Var> {
        Self::make(Op::Abs, vec![self.clone()], self.value().map(f64::abs))
    }

    pub fn square(&self) -> Result<Var> {
        Self::make(Op::Square, vec![self.clone()], self.value().map(|v| v * v))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self) -> Result<Var> {
        let t = self.value();
        if t.is_empty() {
            return Err(bad_shape(OpKind::Mean, t, "at least one element"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        Self::make(Op::Mean, vec![self.clone()], value)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        Self::make(Op::Sum, vec![self.clone()], Tensor::scalar(self.value().sum()))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::EmptyOperands { op: OpKind::Concat })?;
        let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.is_empty() || s.len() != first.shape().len() || &s[..s.len() - 1] != lead {
                return Err(mismatch(OpKind::Concat, first.value(), p.value()));
            }
            widths.push(p.value().last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows = first.value().rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value().data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = total;
        let value = Tensor::new(shape, data).expect("concat shape");
        Self::make(Op::Concat(widths), parts.to_vec(), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let t = self.value();
        if t.rank() == 0 || t.rank() > 2 {
            return Err(bad_shape(OpKind::SoftmaxOverAxis, t, "rank 1 or 2"));
        }
        Self::make(Op::Softmax, vec![self.clone()], t.softmax_last())
    }

    /// Repeats a vector as `rows` rows of a matrix.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Var> {
        let t = self.value();
        if t.rank() != 1 {
            return Err(bad_shape(OpKind::Broadcast, t, "rank 1"));
        }
        Self::make(Op::BroadcastRows, vec![self.clone()], t.broadcast_rows(rows))
    }

    /// Column sums of a matrix: `[m, n] -> [n]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(bad_shape(OpKind::SumRows, t, "rank 2"));
        }
        Self::make(Op::SumRows, vec![self.clone()], t.sum_rows())
    }

    /// Fills `shape` with the value of a one-element tensor.
    pub fn expand(&self, shape: &[usize]) -> Result<Var> {
        let t = self.value();
        let v = t.item().ok_or_else(|| bad_shape(OpKind::Expand, t, "one element"))?;
        Self::make(Op::Expand, vec![self.clone()], Tensor::full(shape, v))
    }

    pub fn transpose(&self) -> Result<Var> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(bad_shape(OpKind::Transpose, t, "rank 2"));
        }
        Self::make(Op::Transpose, vec![self.clone()], t.transpose())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let t = self.value();
        if shape.iter().product::<usize>() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Reshape,
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Self::make(Op::Reshape, vec![self.clone()], t.with_shape(shape.to_vec()))
    }

    /// Entries `[start, start + len)` of the last axis.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var> {
        let t = self.value();
        if t.rank() == 0 || start + len > t.last_dim() {
            return Err(bad_shape(OpKind::Slice, t, &format!("last axis >= {}", start + len)));
        }
        Self::make(Op::Slice { start }, vec![self.clone()], t.slice_last(start, len))
    }

    /// Embeds the last axis at offset `start` of a zero tensor with width `total`.
    pub fn pad(&self, start: usize, total: usize) -> Result<Var> {
        let t = self.value();
        if t.rank() == 0 || start + t.last_dim() > total {
            return Err(bad_shape(OpKind::Pad, t, &format!("last axis <= {}", total - start.min(total))));
        }
        Self::make(Op::Pad { start }, vec![self.clone()], t.pad_last(start, total))
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.kind())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// Applies one primitive by kind to a list of operands.
///
/// Parameterized primitives (`Scale`, `Expand`, `Reshape`, `Slice`, `Pad`,
/// `Broadcast`) need their argument and are only reachable through the
/// corresponding `Var` method.
pub fn tensor_op(kind: OpKind, operands: &[Var]) -> Result<Var> {
    let unary = |f: fn(&Var) -> Result<Var>| -> Result<Var> {
        match operands {
            [a] => f(a),
            _ => Err(AutodiffError::Arity { op: kind, expected: 1, got: operands.len() }),
        }
    };
    let binary = |f: fn(&Var, &Var) -> Result<Var>| -> Result<Var> {
        match operands {
            [a, b] => f(a, b),
            _ => Err(AutodiffError::Arity { op: kind, expected: 2, got: operands.len() }),
        }
    };
    match kind {
        OpKind::MatMul => binary(Var::matmul),
        OpKind::Add => binary(Var::add),
        OpKind::Sub => binary(Var::sub),
        OpKind::ElementwiseMul => binary(Var::mul),
        OpKind::Neg => unary(Var::neg),
        OpKind::Relu => unary(Var::relu),
        OpKind::Tanh => unary(Var::tanh),
        OpKind::Sigmoid => unary(Var::sigmoid),
        OpKind::Sin => unary(Var::sin),
        OpKind::Cos => unary(Var::cos),
        OpKind::Abs => unary(Var::abs),
        OpKind::Square => unary(Var::square),
        OpKind::Mean => unary(Var::mean),
        OpKind::Sum => unary(Var::sum),
        OpKind::SoftmaxOverAxis => unary(Var::softmax),
        OpKind::SumRows => unary(Var::sum_rows),
        OpKind::Transpose => unary(Var::transpose),
        OpKind::Concat => Var::concat(operands),
        other => Err(AutodiffError::NeedsArgument { op: other }),
    }
}
