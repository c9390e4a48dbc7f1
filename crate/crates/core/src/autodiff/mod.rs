//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; nodes only refer to
//! earlier nodes, so reverse index order is a reverse topological order.
//! [`Var`] is a cheap handle to a node and carries the identity of the tape
//! that created it.

mod conv;
pub mod gradcheck;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use conv::{conv_out_len, deconv_out_len};
pub use gradcheck::{grad_check, grad_check_inputs, GradCheckReport};

use crate::real::{gemm, MatRef, Real};
use crate::tensor::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, numel, reduce_to_shape,
    strides, Tensor,
};
use conv::{ConvDims, DeconvDims, Plane};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable was recorded on a different tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn bad_attr(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::InvalidAttr { op, detail }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Stride and padding of a (transposed) convolution. Kernel extents come
/// from the weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
    /// Only meaningful for transposed convolution.
    pub output_padding: usize,
}

impl ConvAttrs {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvAttrs { stride, padding, output_padding: 0 }
    }
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// Inputs: `x, w` or `x, w, bias`.
    Conv2d(ConvAttrs),
    /// Inputs: `x, w` or `x, w, bias`.
    Deconv2d(ConvAttrs),
    Relu,
    Sigmoid,
    Sum,
    Mean,
    SumAxis { axis: usize, keepdim: bool },
    MeanAxis { axis: usize, keepdim: bool },
    Square,
    Sqrt,
    Exp,
    Log,
    Softmax { axis: usize },
    Reshape(Vec<usize>),
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    L2Norm { axis: usize, keepdim: bool },
    Permute(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, attrs: ConvAttrs },
    Deconv2d { x: usize, w: usize, b: Option<usize>, attrs: ConvAttrs },
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    Softmax { a: usize, axis: usize },
    Reshape(usize),
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    L2Norm { a: usize, axis: usize },
    Permute { a: usize, perm: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::L2Norm { .. } => "l2norm",
            Op::Permute { .. } => "permute",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, b, .. } | Op::Deconv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::SumAxis { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::Softmax { a, .. }
            | Op::Slice { a, .. }
            | Op::L2Norm { a, .. }
            | Op::Permute { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[self.check(v).expect("variable from another tape")]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.check(v).ok().and_then(|i| self.leaf_grads.get(i).and_then(|g| g.as_ref()))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let i = self.check(v).ok()?;
        self.leaf_grads.get_mut(i).and_then(|g| g.take())
    }

    /// Adds a leaf; trainable leaves receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable, trainable });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, trainable: false });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    /// Generic dispatch over [`OpKind`].
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(bad_attr(op, format!("expected {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::Add => arity(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2, "div").and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::MatMul => arity(2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Conv2d(attrs) => match inputs {
                [x, w] => self.conv2d(*x, *w, None, *attrs),
                [x, w, b] => self.conv2d(*x, *w, Some(*b), *attrs),
                _ => Err(bad_attr("conv2d", format!("expected 2 or 3 inputs, got {}", inputs.len()))),
            },
            OpKind::Deconv2d(attrs) => match inputs {
                [x, w] => self.deconv2d(*x, *w, None, *attrs),
                [x, w, b] => self.deconv2d(*x, *w, Some(*b), *attrs),
                _ => Err(bad_attr("deconv2d", format!("expected 2 or 3 inputs, got {}", inputs.len()))),
            },
            OpKind::Relu => arity(1, "relu").and_then(|_| self.relu(inputs[0])),
            OpKind::Sigmoid => arity(1, "sigmoid").and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Sum => arity(1, "sum").and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1, "mean").and_then(|_| self.mean(inputs[0])),
            OpKind::SumAxis { axis, keepdim } => {
                arity(1, "sum_axis").and_then(|_| self.sum_axis(inputs[0], *axis, *keepdim))
            }
            OpKind::MeanAxis { axis, keepdim } => {
                arity(1, "mean_axis").and_then(|_| self.mean_axis(inputs[0], *axis, *keepdim))
            }
            OpKind::Square => arity(1, "square").and_then(|_| self.square(inputs[0])),
            OpKind::Sqrt => arity(1, "sqrt").and_then(|_| self.sqrt(inputs[0])),
            OpKind::Exp => arity(1, "exp").and_then(|_| self.exp(inputs[0])),
            OpKind::Log => arity(1, "log").and_then(|_| self.log(inputs[0])),
            OpKind::Softmax { axis } => arity(1, "softmax").and_then(|_| self.softmax(inputs[0], *axis)),
            OpKind::Reshape(shape) => arity(1, "reshape").and_then(|_| self.reshape(inputs[0], shape)),
            OpKind::Slice { axis, start, len } => {
                arity(1, "slice").and_then(|_| self.slice(inputs[0], *axis, *start, *len))
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::L2Norm { axis, keepdim } => {
                arity(1, "l2norm").and_then(|_| self.l2norm(inputs[0], *axis, *keepdim))
            }
            OpKind::Permute(perm) => arity(1, "permute").and_then(|_| self.permute(inputs[0], perm)),
        }
    }

    // ---- elementwise binary (broadcasting) -------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            mismatch(op_name, format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()))
        })?;
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(out_shape, data)
        } else {
            let mut data = vec![T::zero(); numel(&out_shape)];
            let sa = broadcast_strides(va.shape(), &out_shape);
            let mut ai = vec![0usize; data.len()];
            for_each_broadcast(&out_shape, &sa, |o, s| ai[o] = s);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, &sb, |o, s| data[o] = f(da[ai[o]], db[s]));
            Tensor::new(out_shape, data)
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.index, b.index))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.index, b.index))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.map(|x| x + k);
        self.push(value, Op::AddScalar(i))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.map(|x| x * k);
        self.push(value, Op::Scale(i, k))
    }

    // ---- unary ------------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.map(f);
        self.push(value, op(i))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let i = self.check(a)?;
        if self.nodes[i].value.data().iter().any(|&x| x < T::zero()) {
            return Err(AutodiffError::NonFinite { op: "sqrt" });
        }
        self.unary(a, |x| x.sqrt(), Op::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let i = self.check(a)?;
        let s: T = self.nodes[i].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(i))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let i = self.check(a)?;
        let v = &self.nodes[i].value;
        if v.is_empty() {
            return Err(mismatch("mean", "empty input".into()));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(i))
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut out = shape.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        out
    }

    fn axis_checked(&self, i: usize, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.nodes[i].value.shape();
        if axis >= shape.len() {
            return Err(bad_attr(op, format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(axis_split(shape, axis))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let i = self.check(a)?;
        let (outer, len, inner) = self.axis_checked(i, axis, "sum_axis")?;
        let src = self.nodes[i].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        let shape = Self::reduced_shape(self.nodes[i].value.shape(), axis, keepdim);
        self.push(Tensor::new(shape, out), Op::SumAxis { a: i, axis })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let i = self.check(a)?;
        let (outer, len, inner) = self.axis_checked(i, axis, "mean_axis")?;
        let src = self.nodes[i].value.data();
        let scale = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let shape = Self::reduced_shape(self.nodes[i].value.shape(), axis, keepdim);
        self.push(Tensor::new(shape, out), Op::MeanAxis { a: i, axis })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let i = self.check(a)?;
        let (outer, len, inner) = self.axis_checked(i, axis, "softmax")?;
        let src = self.nodes[i].value.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |k: usize| (o * len + k) * inner + j;
                let max = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let shape = self.nodes[i].value.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Softmax { a: i, axis })
    }

    /// Euclidean norm along `axis`. The gradient at a zero vector is taken as 0.
    pub fn l2norm(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let i = self.check(a)?;
        let (outer, len, inner) = self.axis_checked(i, axis, "l2norm")?;
        let src = self.nodes[i].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let s: T = (0..len).map(|k| src[(o * len + k) * inner + j]).map(|x| x * x).sum();
                out[o * inner + j] = s.sqrt();
            }
        }
        let shape = Self::reduced_shape(self.nodes[i].value.shape(), axis, keepdim);
        self.push(Tensor::new(shape, out), Op::L2Norm { a: i, axis })
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(a)?;
        let v = &self.nodes[i].value;
        if numel(shape) != v.len() {
            return Err(mismatch("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let value = v.clone().reshaped(shape);
        self.push(value, Op::Reshape(i))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.check(a)?;
        let (outer, alen, inner) = self.axis_checked(i, axis, "slice")?;
        if start + len > alen || len == 0 {
            return Err(mismatch("slice", format!("range {start}..{} on axis of length {alen}", start + len)));
        }
        let src = self.nodes[i].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * alen + start) * inner..(o * alen + start + len) * inner]);
        }
        let mut shape = self.nodes[i].value.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(shape, out), Op::Slice { a: i, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(bad_attr("concat", "no inputs".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(bad_attr("concat", format!("axis {axis} out of range for shape {first:?}")));
        }
        let mut total = 0;
        for &p in &idx {
            let s = self.nodes[p].value.shape();
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(mismatch("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in &idx {
                let v = &self.nodes[p].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(shape, out), Op::Concat { parts: idx, axis })
    }

    /// Output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let i = self.check(a)?;
        let shape = self.nodes[i].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(bad_attr("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let st = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let src = self.nodes[i].value.data();
        let mut out = vec![T::zero(); src.len()];
        for_each_broadcast(&out_shape, &src_strides, |o, s| out[o] = src[s]);
        self.push(Tensor::new(out_shape, out), Op::Permute { a: i, perm: perm.to_vec() })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `(M,K)·(K,N)` or batched `(B,M,K)·(B,K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape().to_vec(), self.nodes[ib].value.shape().to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            _ => return Err(mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                MatRef::new(&da[bi * m * k..(bi + 1) * m * k], m, k),
                MatRef::new(&db[bi * k * n..(bi + 1) * k * n], k, n),
                &mut out[bi * m * n..(bi + 1) * m * n],
                T::zero(),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(Tensor::new(shape, out), Op::MatMul(ia, ib))
    }

    fn conv_dims(&self, x: usize, w: usize, b: Option<usize>, attrs: ConvAttrs) -> Result<(ConvDims, Vec<usize>)> {
        let (xs, ws) = (self.nodes[x].value.shape(), self.nodes[w].value.shape());
        let [n, c, h, wd] = *xs else {
            return Err(mismatch("conv2d", format!("input must be (N,C,H,W), got {xs:?}")));
        };
        let [f, c2, kh, kw] = *ws else {
            return Err(mismatch("conv2d", format!("weight must be (F,C,KH,KW), got {ws:?}")));
        };
        if c != c2 {
            return Err(mismatch("conv2d", format!("input channels {c} vs weight channels {c2}")));
        }
        if let Some(b) = b {
            if self.nodes[b].value.shape() != [f] {
                return Err(mismatch("conv2d", format!("bias {:?} vs {f} filters", self.nodes[b].value.shape())));
            }
        }
        let (Some(oh), Some(ow)) = (
            conv_out_len(h, kh, attrs.stride, attrs.padding),
            conv_out_len(wd, kw, attrs.stride, attrs.padding),
        ) else {
            return Err(mismatch(
                "conv2d",
                format!("kernel {kh}x{kw} stride {} padding {} does not fit input {h}x{wd}", attrs.stride, attrs.padding),
            ));
        };
        let plane = Plane { c, h, w: wd, kh, kw, stride: attrs.stride, pad: attrs.padding, oh, ow };
        Ok((ConvDims { n, plane, filters: f }, vec![n, f, oh, ow]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, attrs: ConvAttrs) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (dims, out_shape) = self.conv_dims(ix, iw, ib, attrs)?;
        let out = conv::conv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
            &dims,
        );
        self.push(Tensor::new(out_shape, out), Op::Conv2d { x: ix, w: iw, b: ib, attrs })
    }

    fn deconv_dims(&self, x: usize, w: usize, b: Option<usize>, attrs: ConvAttrs) -> Result<(DeconvDims, Vec<usize>)> {
        let (xs, ws) = (self.nodes[x].value.shape(), self.nodes[w].value.shape());
        let [n, cin, h, wd] = *xs else {
            return Err(mismatch("deconv2d", format!("input must be (N,C,H,W), got {xs:?}")));
        };
        let [cin2, cout, kh, kw] = *ws else {
            return Err(mismatch("deconv2d", format!("weight must be (C_in,C_out,KH,KW), got {ws:?}")));
        };
        if cin != cin2 {
            return Err(mismatch("deconv2d", format!("input channels {cin} vs weight channels {cin2}")));
        }
        if let Some(b) = b {
            if self.nodes[b].value.shape() != [cout] {
                return Err(mismatch("deconv2d", format!("bias {:?} vs {cout} channels", self.nodes[b].value.shape())));
            }
        }
        let ConvAttrs { stride, padding, output_padding } = attrs;
        let (Some(oh), Some(ow)) = (
            deconv_out_len(h, kh, stride, padding, output_padding),
            deconv_out_len(wd, kw, stride, padding, output_padding),
        ) else {
            return Err(mismatch(
                "deconv2d",
                format!("kernel {kh}x{kw} stride {stride} padding {padding} output_padding {output_padding} invalid for input {h}x{wd}"),
            ));
        };
        let plane = Plane { c: cout, h: oh, w: ow, kh, kw, stride, pad: padding, oh: h, ow: wd };
        Ok((DeconvDims { n, in_channels: cin, plane }, vec![n, cout, oh, ow]))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, bias: Option<Var>, attrs: ConvAttrs) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (dims, out_shape) = self.deconv_dims(ix, iw, ib, attrs)?;
        let out = conv::deconv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
            &dims,
        );
        self.push(Tensor::new(out_shape, out), Op::Deconv2d { x: ix, w: iw, b: ib, attrs })
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d root / d leaf` into every trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.nodes[r].value.len() != 1 {
            return Err(AutodiffError::NotScalar(self.nodes[r].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; r + 1];
        grads[r] = Some(vec![T::one()]);
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.trainable {
                    if self.leaf_grads.len() < self.nodes.len() {
                        self.leaf_grads.resize(self.nodes.len(), None);
                    }
                    let shape = node.value.shape().to_vec();
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        slot => *slot = Some(Tensor::new(shape, g)),
                    }
                }
                continue;
            }
            for (p, pg) in self.parent_grads(i, &g) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Vector-Jacobian products for node `i` given its output gradient.
    fn parent_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        let elementwise = |a: usize, f: &dyn Fn(usize) -> T| -> Vec<(usize, Vec<T>)> {
            vec![(a, (0..g.len()).map(|k| g[k] * f(k)).collect())]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let mut v = Vec::new();
                if self.wants(*a) {
                    v.push((*a, reduce_to_shape(g, out.shape(), val(*a).shape())));
                }
                if self.wants(*b) {
                    v.push((*b, reduce_to_shape(g, out.shape(), val(*b).shape())));
                }
                v
            }
            Op::Sub(a, b) => {
                let mut v = Vec::new();
                if self.wants(*a) {
                    v.push((*a, reduce_to_shape(g, out.shape(), val(*a).shape())));
                }
                if self.wants(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    v.push((*b, reduce_to_shape(&neg, out.shape(), val(*b).shape())));
                }
                v
            }
            Op::Mul(a, b) => {
                let mut v = Vec::new();
                if self.wants(*a) {
                    v.push((*a, self.broadcast_product(g, out.shape(), *b, *a, |x, _| x)));
                }
                if self.wants(*b) {
                    v.push((*b, self.broadcast_product(g, out.shape(), *a, *b, |x, _| x)));
                }
                v
            }
            Op::Div(a, b) => {
                let mut v = Vec::new();
                if self.wants(*a) {
                    v.push((*a, self.broadcast_product(g, out.shape(), *b, *a, |y, _| T::one() / y)));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q: Vec<T> = g.iter().zip(out.data()).map(|(&gv, &o)| -gv * o).collect();
                    v.push((*b, self.broadcast_product(&q, out.shape(), *b, *b, |y, _| T::one() / y)));
                }
                v
            }
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Scale(a, k) => vec![(*a, g.iter().map(|&x| x * *k).collect())],
            Op::Relu(a) => {
                let x = val(*a).data();
                elementwise(*a, &|k| if x[k] > T::zero() { T::one() } else { T::zero() })
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                elementwise(*a, &|k| y[k] * (T::one() - y[k]))
            }
            Op::Square(a) => {
                let x = val(*a).data();
                elementwise(*a, &|k| T::lit(2.0) * x[k])
            }
            Op::Sqrt(a) => {
                let y = out.data();
                elementwise(*a, &|k| if y[k] > T::zero() { T::lit(0.5) / y[k] } else { T::zero() })
            }
            Op::Exp(a) => {
                let y = out.data();
                elementwise(*a, &|k| y[k])
            }
            Op::Log(a) => {
                let x = val(*a).data();
                elementwise(*a, &|k| T::one() / x[k])
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = axis_split(val(*a).shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::lit(len as f64)
                } else {
                    T::one()
                };
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for j in 0..inner {
                            ga[(o * len + k) * inner + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            ga[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::L2Norm { a, axis } => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (xd, y) = (x.data(), out.data());
                let mut ga = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let norm = y[o * inner + j];
                        if norm > T::zero() {
                            let s = g[o * inner + j] / norm;
                            for k in 0..len {
                                let at = (o * len + k) * inner + j;
                                ga[at] = xd[at] * s;
                            }
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Slice { a, axis, start } => {
                let shape = val(*a).shape();
                let (outer, alen, inner) = axis_split(shape, *axis);
                let len = out.shape()[*axis];
                let mut ga = vec![T::zero(); numel(shape)];
                for o in 0..outer {
                    ga[(o * alen + start) * inner..(o * alen + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, ga)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let mut v = Vec::new();
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                        }
                        v.push((p, gp));
                    }
                    offset += len;
                }
                v
            }
            Op::Permute { a, perm } => {
                let shape = val(*a).shape();
                let st = strides(shape);
                let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let mut ga = vec![T::zero(); g.len()];
                for_each_broadcast(out.shape(), &src_strides, |o, s| ga[s] = g[o]);
                vec![(*a, ga)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let batched = sa.len() == 3;
                let (batch, m, k) = if batched { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
                let n = sb[sb.len() - 1];
                let (da, db) = (val(*a).data(), val(*b).data());
                let mut v = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        gemm(
                            MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            MatRef::new(&db[bi * k * n..(bi + 1) * k * n], k, n).t(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            T::zero(),
                        );
                    }
                    v.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        gemm(
                            MatRef::new(&da[bi * m * k..(bi + 1) * m * k], m, k).t(),
                            MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            T::zero(),
                        );
                    }
                    v.push((*b, gb));
                }
                v
            }
            Op::Conv2d { x, w, b, attrs } => {
                let (dims, _) = self.conv_dims(*x, *w, *b, *attrs).expect("validated in forward");
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let grads = conv::conv2d_backward(val(*x).data(), val(*w).data(), g, &dims, need);
                collect_conv_grads(*x, *w, *b, grads)
            }
            Op::Deconv2d { x, w, b, attrs } => {
                let (dims, _) = self.deconv_dims(*x, *w, *b, *attrs).expect("validated in forward");
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let grads = conv::deconv2d_backward(val(*x).data(), val(*w).data(), g, &dims, need);
                collect_conv_grads(*x, *w, *b, grads)
            }
        }
    }

    /// `reduce_to_shape(g ⊙ f(other_broadcast), target)`.
    fn broadcast_product(
        &self,
        g: &[T],
        out_shape: &[usize],
        other: usize,
        target: usize,
        f: impl Fn(T, usize) -> T,
    ) -> Vec<T> {
        let ov = &self.nodes[other].value;
        let od = ov.data();
        let mut prod = vec![T::zero(); g.len()];
        if ov.shape() == out_shape {
            for (k, p) in prod.iter_mut().enumerate() {
                *p = g[k] * f(od[k], k);
            }
        } else {
            let st = broadcast_strides(ov.shape(), out_shape);
            for_each_broadcast(out_shape, &st, |o, s| prod[o] = g[o] * f(od[s], s));
        }
        reduce_to_shape(&prod, out_shape, self.nodes[target].value.shape())
    }
}

fn collect_conv_grads<T>(x: usize, w: usize, b: Option<usize>, g: conv::ConvGrads<T>) -> Vec<(usize, Vec<T>)> {
    let mut v = Vec::new();
    if let Some(dx) = g.dx {
        v.push((x, dx));
    }
    if let Some(dw) = g.dw {
        v.push((w, dw));
    }
    if let (Some(b), Some(db)) = (b, g.db) {
        v.push((b, db));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v)
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negative_and_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.param(Tensor::scalar(5.0));
        let c = tape.mul(a, b).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 5.0);
        assert_eq!(tape.grad(b).unwrap().item(), 3.0);
    }

    #[test]
    fn conv_output_shape_matches_first_encoder_layer() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 28, 28]));
        let w = tape.constant(Tensor::zeros(&[256, 1, 9, 9]));
        let y = tape.conv2d(x, w, None, ConvAttrs::new(1, 0)).unwrap();
        assert_eq!(tape.shape(y), &[1, 256, 20, 20]);
    }

    #[test]
    fn shape_errors_name_operation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "add", .. }));
        assert!(err.to_string().contains("[2, 3]"));
        let err = tape.matmul(a, a).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[0.0]));
        assert_eq!(tape.log(a).unwrap_err(), AutodiffError::NonFinite { op: "log" });
    }

    #[test]
    fn backward_requires_scalar_root_on_same_tape() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(a).unwrap_err(), AutodiffError::NotScalar(vec![2]));
        let mut other = Tape::<f64>::new();
        let s = other.param(Tensor::scalar(1.0));
        assert_eq!(tape.backward(s).unwrap_err(), AutodiffError::ForeignVar);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 8.0);
    }

    #[test]
    fn permute_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let s = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 4]);
        assert_eq!(tape.value(s).data()[0], 4.0);
        let c = tape.concat(&[s, s], 2).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 8]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin() * 4.0));
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn deconv_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5, 4, 4]));
        let y = tape.deconv2d(x, w, None, ConvAttrs::new(1, 0)).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 6, 6]);
    }
}
