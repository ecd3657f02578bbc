use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Offset,
    MulScalar,
    DivScalar,
    ScaleRows,
    Concat,
    Slice,
    Reshape,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    SumRows,
    Square,
    Sqrt,
    Clamp,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::MulScalar => "mul_scalar",
            OpKind::DivScalar => "div_scalar",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumRows => "sum_rows",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Clamp => "clamp",
        }
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Unary(OpKind, Var),
    Binary(OpKind, Var, Var),
    Scale(Var, S),
    Offset(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start_row: usize },
    Clamp { input: Var, lo: S, hi: S },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    leaves: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&var)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<S>) -> Tensor<S> {
        self.leaves
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Records primitive applications in execution order.
///
/// Node ids are assigned sequentially, so every input precedes its output
/// and a reverse sweep over ids is a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn shape_err(op: OpKind, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a trainable parameter or an input under test).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        match &self.nodes[var.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Unary(k, _) | Op::Binary(k, _, _) => *k,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Ids of the nodes `var` was computed from.
    pub fn inputs(&self, var: Var) -> Vec<Var> {
        match &self.nodes[var.0].op {
            Op::Leaf => vec![],
            Op::Unary(_, a) | Op::Scale(a, _) | Op::Offset(a) => vec![*a],
            Op::Slice { input, .. } | Op::Clamp { input, .. } => vec![*input],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Concat(v) => v.clone(),
        }
    }

    /// The single value of a one-element node.
    pub fn item(&self, var: Var) -> Result<S> {
        self.value(var).item()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, kind: OpKind, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Unary(_, a) | Op::Scale(a, _) | Op::Offset(a) => self.requires_grad(*a),
            Op::Slice { input, .. } | Op::Clamp { input, .. } => self.requires_grad(*input),
            Op::Binary(_, a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Concat(v) => v.iter().any(|&x| self.requires_grad(x)),
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn unary(&mut self, kind: OpKind, a: Var, f: impl Fn(S) -> S) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| f(v)).collect();
        self.record(kind, shape, data, Op::Unary(kind, a))
    }

    fn elementwise(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(kind, x.shape(), y.shape()));
        }
        let shape = x.shape().to_vec();
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        self.record(kind, shape, data, Op::Binary(kind, a, b))
    }

    /// Matrix product. A 1-D left operand is treated as a single row and the
    /// result is 1-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, vec_lhs) = match x.shape() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(shape_err(OpKind::MatMul, x.shape(), y.shape())),
        };
        let n = match y.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(shape_err(OpKind::MatMul, x.shape(), y.shape())),
        };
        let data = matmul_kernel(x.data(), y.data(), m, k, n);
        let shape = if vec_lhs { vec![n] } else { vec![m, n] };
        self.record(OpKind::MatMul, shape, data, Op::Binary(OpKind::MatMul, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(OpKind::Add, a, b, |u, v| u + v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(OpKind::Sub, a, b, |u, v| u - v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(OpKind::Mul, a, b, |u, v| u * v)
    }

    /// Adds a bias vector of length `cols` to every row of an `rows × cols`
    /// matrix.
    pub fn add_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(m), self.value(bias));
        let cols = match (x.shape(), b.shape()) {
            ([_, c], [bc]) if c == bc => *c,
            _ => return Err(shape_err(OpKind::AddRow, x.shape(), b.shape())),
        };
        let shape = x.shape().to_vec();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % cols])
            .collect();
        self.record(OpKind::AddRow, shape, data, Op::Binary(OpKind::AddRow, m, bias))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v * c).collect();
        self.record(OpKind::Scale, shape, data, Op::Scale(a, c))
    }

    /// Addition of a constant.
    pub fn offset(&mut self, a: Var, c: S) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v + c).collect();
        self.record(OpKind::Offset, shape, data, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -S::one())
    }

    /// Tensor times a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(s));
        if y.len() != 1 {
            return Err(shape_err(OpKind::MulScalar, x.shape(), y.shape()));
        }
        let c = y.data()[0];
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v * c).collect();
        self.record(OpKind::MulScalar, shape, data, Op::Binary(OpKind::MulScalar, a, s))
    }

    /// Tensor divided by a one-element tensor.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(s));
        if y.len() != 1 {
            return Err(shape_err(OpKind::DivScalar, x.shape(), y.shape()));
        }
        let c = y.data()[0];
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v / c).collect();
        self.record(OpKind::DivScalar, shape, data, Op::Binary(OpKind::DivScalar, a, s))
    }

    /// Scales row `i` of an `rows × cols` matrix by `weights[i]`.
    pub fn scale_rows(&mut self, m: Var, weights: Var) -> Result<Var> {
        let (x, w) = (self.value(m), self.value(weights));
        let cols = match (x.shape(), w.shape()) {
            ([r, c], [wr]) if r == wr => *c,
            _ => return Err(shape_err(OpKind::ScaleRows, x.shape(), w.shape())),
        };
        let shape = x.shape().to_vec();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * w.data()[i / cols.max(1)])
            .collect();
        self.record(OpKind::ScaleRows, shape, data, Op::Binary(OpKind::ScaleRows, m, weights))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero tensors"));
        };
        let tail: Vec<usize> = self.shape(first).iter().skip(1).copied().collect();
        if self.shape(first).is_empty() {
            return Err(shape_err(OpKind::Concat, &[], &[]));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(shape_err(OpKind::Concat, self.shape(first), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.record(OpKind::Concat, shape, data, Op::Concat(parts.to_vec()))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().is_empty() || start >= end || end > x.shape()[0] {
            return Err(shape_err(OpKind::Slice, x.shape(), &[start, end]));
        }
        let stride = x.row_stride();
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let data = x.data()[start * stride..end * stride].to_vec();
        self.record(OpKind::Slice, shape, data, Op::Slice { input: a, start_row: start })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(shape_err(OpKind::Reshape, x.shape(), shape));
        }
        let data = x.data().to_vec();
        self.record(OpKind::Reshape, shape.to_vec(), data, Op::Unary(OpKind::Reshape, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Sigmoid, a, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Tanh, a, |v| v.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Relu, a, |v| v.max(S::zero()))
    }

    /// Elementwise `max(0, x)`; the hinge of margin losses.
    pub fn max0(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Exp, a, |v| v.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Log, a, |v| v.ln())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Square, a, |v| v * v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Sqrt, a, |v| v.sqrt())
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        self.record(OpKind::Clamp, shape, data, Op::Clamp { input: a, lo, hi })
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.record(OpKind::Sum, vec![], vec![total], Op::Unary(OpKind::Sum, a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let total: S = x.data().iter().copied().sum();
        let m = total / S::lit(x.len() as f64);
        self.record(OpKind::Mean, vec![], vec![m], Op::Unary(OpKind::Mean, a))
    }

    /// Per-row sums of a `rows × cols` matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [rows, cols] = x.shape() else {
            return Err(shape_err(OpKind::SumRows, x.shape(), &[]));
        };
        let (rows, cols) = (*rows, *cols);
        let data = (0..rows)
            .map(|r| x.data()[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect();
        self.record(OpKind::SumRows, vec![rows], data, Op::Unary(OpKind::SumRows, a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = self.value(loss);
        if root.len() != 1 {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out.leaves
                        .insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *a, |dst| {
                        dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d = *d + gv * c)
                    });
                }
                Op::Offset(a) => {
                    self.accumulate(&mut grads, *a, |dst| add_into(dst, &g));
                }
                Op::Clamp { input, lo, hi } => {
                    let x = self.value(*input).data();
                    let (lo, hi) = (*lo, *hi);
                    self.accumulate(&mut grads, *input, |dst| {
                        for ((d, &gv), &xv) in dst.iter_mut().zip(&g).zip(x) {
                            if xv >= lo && xv <= hi {
                                *d = *d + gv;
                            }
                        }
                    });
                }
                Op::Slice { input, start_row } => {
                    let stride = self.value(*input).row_stride();
                    let off = start_row * stride;
                    self.accumulate(&mut grads, *input, |dst| {
                        add_into(&mut dst[off..off + g.len()], &g)
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.accumulate(&mut grads, p, |dst| add_into(dst, &g[off..off + n]));
                        off += n;
                    }
                }
                Op::Unary(kind, a) => {
                    let a = *a;
                    let x = self.value(a).data();
                    match kind {
                        OpKind::Reshape => self.accumulate(&mut grads, a, |dst| add_into(dst, &g)),
                        OpKind::Sigmoid => self.accumulate(&mut grads, a, |dst| {
                            zip3(dst, &g, y, |gv, yv| gv * yv * (S::one() - yv))
                        }),
                        OpKind::Tanh => self.accumulate(&mut grads, a, |dst| {
                            zip3(dst, &g, y, |gv, yv| gv * (S::one() - yv * yv))
                        }),
                        OpKind::Relu => self.accumulate(&mut grads, a, |dst| {
                            zip3(dst, &g, x, |gv, xv| if xv > S::zero() { gv } else { S::zero() })
                        }),
                        OpKind::Exp => {
                            self.accumulate(&mut grads, a, |dst| zip3(dst, &g, y, |gv, yv| gv * yv))
                        }
                        OpKind::Log => {
                            self.accumulate(&mut grads, a, |dst| zip3(dst, &g, x, |gv, xv| gv / xv))
                        }
                        OpKind::Square => self.accumulate(&mut grads, a, |dst| {
                            zip3(dst, &g, x, |gv, xv| gv * (xv + xv))
                        }),
                        OpKind::Sqrt => self.accumulate(&mut grads, a, |dst| {
                            // subgradient 0 at the origin
                            zip3(dst, &g, y, |gv, yv| {
                                if yv > S::zero() {
                                    gv / (yv + yv)
                                } else {
                                    S::zero()
                                }
                            })
                        }),
                        OpKind::Sum => {
                            let gv = g[0];
                            self.accumulate(&mut grads, a, |dst| dst.iter_mut().for_each(|d| *d = *d + gv))
                        }
                        OpKind::Mean => {
                            let gv = g[0] / S::lit(x.len() as f64);
                            self.accumulate(&mut grads, a, |dst| dst.iter_mut().for_each(|d| *d = *d + gv))
                        }
                        OpKind::SumRows => {
                            let cols = self.value(a).row_stride();
                            self.accumulate(&mut grads, a, |dst| {
                                dst.iter_mut()
                                    .enumerate()
                                    .for_each(|(i, d)| *d = *d + g[i / cols])
                            })
                        }
                        _ => unreachable!("unary op {kind:?}"),
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    let (xa, xb) = (self.value(a), self.value(b));
                    match kind {
                        OpKind::Add => {
                            self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                            self.accumulate(&mut grads, b, |dst| add_into(dst, &g));
                        }
                        OpKind::Sub => {
                            self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                            self.accumulate(&mut grads, b, |dst| {
                                dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d = *d - gv)
                            });
                        }
                        OpKind::Mul => {
                            self.accumulate(&mut grads, a, |dst| zip3(dst, &g, xb.data(), |gv, v| gv * v));
                            self.accumulate(&mut grads, b, |dst| zip3(dst, &g, xa.data(), |gv, v| gv * v));
                        }
                        OpKind::AddRow => {
                            let cols = xb.len();
                            self.accumulate(&mut grads, a, |dst| add_into(dst, &g));
                            self.accumulate(&mut grads, b, |dst| {
                                for (i, &gv) in g.iter().enumerate() {
                                    dst[i % cols] = dst[i % cols] + gv;
                                }
                            });
                        }
                        OpKind::MulScalar => {
                            let c = xb.data()[0];
                            self.accumulate(&mut grads, a, |dst| {
                                dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d = *d + gv * c)
                            });
                            let ds: S = g.iter().zip(xa.data()).map(|(&gv, &v)| gv * v).sum();
                            self.accumulate(&mut grads, b, |dst| dst[0] = dst[0] + ds);
                        }
                        OpKind::DivScalar => {
                            let c = xb.data()[0];
                            self.accumulate(&mut grads, a, |dst| {
                                dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d = *d + gv / c)
                            });
                            let num: S = g.iter().zip(xa.data()).map(|(&gv, &v)| gv * v).sum();
                            self.accumulate(&mut grads, b, |dst| dst[0] = dst[0] - num / (c * c));
                        }
                        OpKind::ScaleRows => {
                            let cols = xa.row_stride().max(1);
                            let w = xb.data();
                            self.accumulate(&mut grads, a, |dst| {
                                for (i, (d, &gv)) in dst.iter_mut().zip(&g).enumerate() {
                                    *d = *d + gv * w[i / cols];
                                }
                            });
                            self.accumulate(&mut grads, b, |dst| {
                                for (i, (&gv, &v)) in g.iter().zip(xa.data()).enumerate() {
                                    dst[i / cols] = dst[i / cols] + gv * v;
                                }
                            });
                        }
                        OpKind::MatMul => {
                            let (m, k) = match xa.shape() {
                                [k] => (1, *k),
                                s => (s[0], s[1]),
                            };
                            let n = xb.shape()[1];
                            if self.requires_grad(a) {
                                let da = matmul_bt(&g, xb.data(), m, n, k);
                                self.accumulate(&mut grads, a, |dst| add_into(dst, &da));
                            }
                            self.accumulate(&mut grads, b, |dst| matmul_at_into(dst, xa.data(), &g, m, k, n));
                        }
                        _ => unreachable!("binary op {kind:?}"),
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs `f` on the gradient buffer of `target`, allocating it on first use.
    /// Inputs that do not require gradients are skipped.
    fn accumulate(&self, grads: &mut [Option<Vec<S>>], target: Var, f: impl FnOnce(&mut Vec<S>)) {
        if !self.requires_grad(target) {
            return;
        }
        let slot = &mut grads[target.0];
        let buf = slot.get_or_insert_with(|| vec![S::zero(); self.nodes[target.0].value.len()]);
        f(buf);
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn zip3<S: Scalar>(dst: &mut [S], g: &[S], x: &[S], f: impl Fn(S, S) -> S) {
    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
        *d = *d + f(gv, xv);
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`.
pub(crate) fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(c, &bv)| *c = *c + av * bv);
        }
    }
    c
}

/// `G[m×n] · Bᵀ` where `B` is `k×n`.
fn matmul_bt<S: Scalar>(g: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `dst[k×n] += Aᵀ · G` where `A` is `m×k` and `G` is `m×n`.
fn matmul_at_into<S: Scalar>(dst: &mut [S], a: &[S], g: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let drow = &mut dst[p * n..(p + 1) * n];
            drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d = *d + av * gv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::identity(3));
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0).unwrap());
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.item(y).unwrap(), 0.5);
    }

    #[test]
    fn concat_lengths_add() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[3], &[3., 4., 5.]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[5]);
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(t(&[3], &[0.; 3]));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0).unwrap());
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_sigmoid_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[4]));
        let s = tape.sigmoid(x).unwrap();
        let y = tape.sum(s).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn sqrt_at_zero_has_zero_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[1]));
        let y = tape.sqrt(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1., 2.]));
        let b = tape.param(t(&[2], &[3., 4.]));
        let c = tape.mul(a, b).unwrap();
        let d = tape.concat(&[c, a]).unwrap();
        let e = tape.sum(d).unwrap();
        for id in 0..tape.len() {
            let v = Var(id);
            assert!(tape.inputs(v).iter().all(|i| i.id() < id));
        }
        let g = tape.backward(e).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4., 5.]);
        assert_eq!(g.get(b).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.param(t(&[2], &[3., 4.]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.len(), 1);
    }
}
