//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! ever appended, so the list is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep. Gradients are tracked only
//! through nodes that depend on a parameter leaf; constants cost nothing on
//! the way back.

use thiserror::Error;

use crate::ops::{self, Activation, ConvGeometry};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardAlreadyRun,
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Conv {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample(NodeId),
    Act(NodeId, Activation),
    Reshape(NodeId),
    MulConst(NodeId, Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Square(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Clamp(NodeId, T, T),
    Sum(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    is_param: bool,
}

/// A recorded computation. One graph per forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded value in creation order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id.0].is_param = true;
        id
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].is_param
    }

    /// Gradient of the last backward pass with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> GraphError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
        .into()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `x[N x F] + b[F]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() != 2 || bv.numel() != xv.shape()[1] {
            return Err(self.shape_err("add_row_bias", x, bias));
        }
        let f = bv.numel();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(f) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddRowBias(x, bias), out, rg))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, GraphError> {
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let (out, cols) = ops::conv2d_forward(
            self.value(input),
            self.value(kernel),
            Some(self.value(bias)),
            stride,
            padding,
        )?;
        let rg = self.rg(&[input, kernel, bias]);
        // the unfolded columns are only needed for the kernel gradient
        let cols = if self.nodes[kernel.0].requires_grad {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            Op::Conv {
                input,
                kernel,
                bias,
                geometry,
                cols,
            },
            out,
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId, GraphError> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input), kernel, stride)?;
        let rg = self.rg(&[input]);
        Ok(self.push(Op::MaxPool { input, argmax }, out, rg))
    }

    pub fn upsample_bilinear2x(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let out = ops::upsample_bilinear2x(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(Op::Upsample(input), out, rg))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return input;
        }
        let out = ops::activation(self.value(input), kind);
        let rg = self.rg(&[input]);
        self.push(Op::Act(input, kind), out, rg)
    }

    pub fn reshape(&mut self, input: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId, GraphError> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(Op::Reshape(input), out, rg))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let v = self.value(input);
        let shape = vec![v.batch(), v.row_len()];
        self.reshape(input, shape)
    }

    /// Elementwise product with a constant. The constant either matches the
    /// input shape or holds one row that is broadcast over the leading axis.
    pub fn mul_const(&mut self, input: NodeId, factor: Tensor<T>) -> Result<NodeId, GraphError> {
        let xv = self.value(input);
        let out = if factor.numel() == xv.numel() {
            xv.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect()
        } else if factor.numel() == xv.row_len() {
            let w = xv.row_len();
            xv.data()
                .iter()
                .enumerate()
                .map(|(i, &a)| a * factor.data()[i % w])
                .collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                left: xv.shape().to_vec(),
                right: factor.shape().to_vec(),
            }
            .into());
        };
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(Op::MulConst(input, factor), out, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, GraphError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = T::from_usize(self.value(a).numel()).expect("element count fits the scalar");
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Runs the reverse sweep from a scalar `loss`. Callable once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if self.backward_done {
            return Err(GraphError::BackwardAlreadyRun);
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(GraphError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, data: Vec<T>) -> Result<(), GraphError> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e = *e + d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[id.0].value.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<(), GraphError> {
        let gd = g.data();
        let node = &self.nodes[i];
        let mut updates: Vec<(NodeId, Vec<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, false, bv.data(), true, T::zero(), &mut da);
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), true, gd, false, T::zero(), &mut db);
                    updates.push((*b, db));
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    updates.push((*x, gd.to_vec()));
                }
                if self.wants(*b) {
                    let f = self.value(*b).numel();
                    let mut db = vec![T::zero(); f];
                    for row in gd.chunks(f) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    updates.push((*b, db));
                }
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geometry,
                cols,
            } => {
                let need_kernel = self.wants(*kernel);
                let grads = ops::conv2d_backward(
                    geometry,
                    gd,
                    self.value(*kernel).data(),
                    cols,
                    self.wants(*input),
                    need_kernel,
                );
                if let Some(dx) = grads.input {
                    updates.push((*input, dx));
                }
                if need_kernel {
                    updates.push((*kernel, grads.kernel));
                }
                if self.wants(*bias) {
                    updates.push((*bias, grads.bias));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &v) in argmax.iter().zip(gd) {
                    dx[src] = dx[src] + v;
                }
                updates.push((*input, dx));
            }
            Op::Upsample(input) => {
                let dx = ops::upsample_bilinear2x_backward(self.value(*input).shape(), gd);
                updates.push((*input, dx));
            }
            Op::Act(input, kind) => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let dx = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                updates.push((*input, dx));
            }
            Op::Reshape(input) => updates.push((*input, gd.to_vec())),
            Op::MulConst(input, factor) => {
                let f = factor.data();
                let dx = gd.iter().enumerate().map(|(j, &v)| v * f[j % f.len()]).collect();
                updates.push((*input, dx));
            }
            Op::Add(a, b) => {
                updates.push((*a, gd.to_vec()));
                updates.push((*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, gd.to_vec()));
                updates.push((*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                updates.push((*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                updates.push((*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(a, c) => updates.push((*a, gd.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(a, _) => updates.push((*a, gd.to_vec())),
            Op::Square(a) => {
                let two = T::one() + T::one();
                let x = self.value(*a).data();
                updates.push((*a, gd.iter().zip(x).map(|(&g, &v)| g * two * v).collect()));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                updates.push((*a, dx));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                updates.push((*a, gd.iter().zip(x).map(|(&g, &v)| g / v).collect()));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                updates.push((*a, dx));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                updates.push((*a, vec![gd[0]; n]));
            }
        }
        for (id, d) in updates {
            self.accumulate(id, d)?;
        }
        Ok(())
    }
}

/// Plain gradient descent: `param <- param - lr * grad`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<(), TensorError> {
    if param.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if lr == T::zero() {
        return Ok(());
    }
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0; 12]);
        assert_eq!(g.grad(p).unwrap().shape(), &[2, 3, 2]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2], &[1.0, -2.0]));
        let sq = g.square(p);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn second_backward_is_error() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[1], &[3.0]));
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(GraphError::BackwardAlreadyRun));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(GraphError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let m = g.mul(c, p).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn maxpool_gradient_goes_to_first_tie() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[1, 1, 2, 2], &[4.0; 4]));
        let m = g.maxpool2d(p, 2, 2).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sgd_hand_values() {
        let mut p = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(p.item(), 0.0);
        let mut q = t(&[2], &[1.5, -0.25]);
        let before = q.clone();
        sgd_step(&mut q, &t(&[2], &[7.0, 8.0]), 0.0).unwrap();
        assert_eq!(q, before);
        sgd_step(&mut q, &Tensor::zeros([2]), 0.3).unwrap();
        assert_eq!(q, before);
        assert!(sgd_step(&mut q, &Tensor::zeros([3]), 0.3).is_err());
    }

    #[test]
    fn frozen_kernel_still_passes_input_gradient() {
        let x = Tensor::<f64>::from_fn([2, 2, 5, 5], |i| (i as f64 * 0.3).sin());
        let k = Tensor::<f64>::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.7).cos());
        let b = Tensor::<f64>::from_fn([3], |i| i as f64);
        let run = |train_kernel: bool| {
            let mut g = Graph::<f64>::new();
            let xi = g.param(x.clone());
            let ki = if train_kernel { g.param(k.clone()) } else { g.constant(k.clone()) };
            let bi = g.constant(b.clone());
            let y = g.conv2d(xi, ki, bi, 2, 1).unwrap();
            let sq = g.square(y);
            let l = g.sum(sq);
            g.backward(l).unwrap();
            g.grad(xi).unwrap().clone()
        };
        assert_eq!(run(true), run(false));
    }
}
