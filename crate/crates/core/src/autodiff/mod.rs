//! Reverse-mode differentiation over whole tensors.
//!
//! Network code is written once against [`Backend`]. Running it on a
//! [`Graph`] records a tape that [`Graph::backward`] replays in reverse;
//! running it on [`Eager`] just computes values and drops intermediates as
//! soon as they go out of scope, which is what inference on large images
//! wants.

pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub use kernels::{BinaryOp, ConvSpec};

/// Operations shared by the recording and non-recording executors.
pub trait Backend<T: Scalar> {
    type Value: Clone;

    fn tensor<'v>(&'v self, v: &'v Self::Value) -> &'v Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value;

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, spec: ConvSpec) -> Result<Self::Value>;

    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// 2x2 / stride 2 max pooling; spatial dims must be even.
    fn maxpool2(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn pad_replicate(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;

    fn crop(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;

    fn upsample2(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn instance_norm(&mut self, x: &Self::Value, gain: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;

    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    fn binary(&mut self, op: BinaryOp, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn scale(&mut self, x: &Self::Value, s: T) -> Result<Self::Value>;

    fn add_scalar(&mut self, x: &Self::Value, s: T) -> Result<Self::Value>;

    fn clamp(&mut self, x: &Self::Value, lo: T, hi: T) -> Result<Self::Value>;

    fn lut_trilinear(&mut self, x: &Self::Value, grid: &Self::Value, c_max: T) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Add, a, b)
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Sub, a, b)
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Mul, a, b)
    }

    fn shape(&self, v: &Self::Value) -> Shape {
        self.tensor(v).shape()
    }
}

/// Executes operations immediately without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Backend<T> for Eager {
    type Value = Tensor<T>;

    fn tensor<'v>(&'v self, v: &'v Tensor<T>) -> &'v Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
        kernels::conv2d(x, w, b, spec)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::gelu(x))
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::sigmoid(x))
    }

    fn maxpool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::maxpool2(x).map(|(t, _)| t)
    }

    fn pad_replicate(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        kernels::pad_replicate(x, h, w)
    }

    fn crop(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        kernels::crop(x, h, w)
    }

    fn upsample2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::upsample_bilinear2x(x))
    }

    fn instance_norm(&mut self, x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::instance_norm(x, gain, bias).map(|(t, _)| t)
    }

    fn concat(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        kernels::concat_channels(&refs)
    }

    fn binary(&mut self, op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::binary(op, a, b)
    }

    fn scale(&mut self, x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        Ok(x.map(|v| v * s))
    }

    fn add_scalar(&mut self, x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        Ok(x.map(|v| v + s))
    }

    fn clamp(&mut self, x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
        Ok(kernels::clamp(x, lo, hi))
    }

    fn lut_trilinear(&mut self, x: &Tensor<T>, grid: &Tensor<T>, c_max: T) -> Result<Tensor<T>> {
        kernels::lut_trilinear(x, grid, c_max)
    }
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Gelu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    PadReplicate(Var),
    Crop(Var),
    Upsample(Var),
    InstanceNorm {
        x: Var,
        gain: Var,
        saved: kernels::InstanceNormSaved<T>,
        bias: Var,
    },
    Concat(Vec<Var>),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Lut {
        x: Var,
        grid: Var,
        c_max: T,
    },
    Sum(Var),
    Mean(Var),
    L1 {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, so
/// reverse index order is a valid reverse topological order.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input (a parameter or an input whose
    /// gradient is wanted).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignVar)
    }

    fn requires(&self, v: Var) -> Result<bool> {
        self.node(v).map(|n| n.requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(kernels::sum_all(self.value(x)?));
        let rg = self.requires(x)?;
        Ok(self.push(v, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        let v = Tensor::scalar(kernels::sum_all(t) / T::lit(t.len() as f64));
        let rg = self.requires(x)?;
        Ok(self.push(v, Op::Mean(x), rg))
    }

    /// Mean absolute difference between two same-shaped values.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::scalar(kernels::l1_mean(self.value(a)?, self.value(b)?)?);
        let rg = self.requires(a)? || self.requires(b)?;
        Ok(self.push(v, Op::L1 { a, b }, rg))
    }

    /// Back-propagates from a scalar `loss`, visiting every recorded node at
    /// most once in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.shape() != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss(root.value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(Tensor::ones([1, 1, 1, 1]));

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.index].requires_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let cg = kernels::conv2d_backward(
                    self.val(*x),
                    self.val(*w),
                    g,
                    *spec,
                    [self.wants(*x), self.wants(*w), self.wants(*b)],
                );
                for (v, t) in [(*x, cg.input), (*w, cg.weight), (*b, cg.bias)] {
                    if let Some(t) = t {
                        self.accumulate(grads, v, t);
                    }
                }
            }
            Op::Gelu(x) => {
                let gx = kernels::gelu_backward(self.val(*x), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = kernels::sigmoid_backward(&node.value, g);
                self.accumulate(grads, *x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let gx = kernels::maxpool2_backward(self.val(*x).shape(), argmax, g);
                self.accumulate(grads, *x, gx);
            }
            Op::PadReplicate(x) => {
                let gx = kernels::pad_replicate_backward(self.val(*x).shape(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Crop(x) => {
                let gx = kernels::crop_backward(self.val(*x).shape(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample(x) => {
                let gx = kernels::upsample_bilinear2x_backward(self.val(*x).shape(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::InstanceNorm { x, gain, saved, bias } => {
                let (gx, ggain, gbias) = kernels::instance_norm_backward(saved, self.val(*gain), g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *bias, gbias);
            }
            Op::Concat(parts) => {
                let shapes: Vec<Shape> = parts.iter().map(|p| self.val(*p).shape()).collect();
                for (p, gp) in parts.iter().zip(kernels::concat_channels_backward(&shapes, g)) {
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::Binary { op, a, b } => {
                let (ga, gb) = kernels::binary_backward(*op, self.val(*a), self.val(*b), g, [self.wants(*a), self.wants(*b)]);
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Clamp { x, lo, hi } => {
                let gx = kernels::clamp_backward(self.val(*x), *lo, *hi, g);
                self.accumulate(grads, *x, gx);
            }
            Op::Lut { x, grid, c_max } => {
                let (gx, ggrid) =
                    kernels::lut_trilinear_backward(self.val(*x), self.val(*grid), *c_max, g, [self.wants(*x), self.wants(*grid)]);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gg) = ggrid {
                    self.accumulate(grads, *grid, gg);
                }
            }
            Op::Sum(x) => {
                let shape = self.val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let t = self.val(*x);
                let v = g.item() / T::lit(t.len() as f64);
                self.accumulate(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::L1 { a, b } => {
                let ga = kernels::l1_mean_backward(self.val(*a), self.val(*b), g.item());
                if self.wants(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

impl<T: Scalar> Backend<T> for Graph<T> {
    type Value = Var;

    fn tensor<'v>(&'v self, v: &'v Var) -> &'v Tensor<T> {
        self.value(*v).expect("variable recorded on this graph")
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, spec: ConvSpec) -> Result<Var> {
        let v = kernels::conv2d(self.value(*x)?, self.value(*w)?, self.value(*b)?, spec)?;
        let rg = self.requires(*x)? || self.requires(*w)? || self.requires(*b)?;
        Ok(self.push(v, Op::Conv2d { x: *x, w: *w, b: *b, spec }, rg))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let v = kernels::gelu(self.value(*x)?);
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::Gelu(*x), rg))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let v = kernels::sigmoid(self.value(*x)?);
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::Sigmoid(*x), rg))
    }

    fn maxpool2(&mut self, x: &Var) -> Result<Var> {
        let (v, argmax) = kernels::maxpool2(self.value(*x)?)?;
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::MaxPool { x: *x, argmax }, rg))
    }

    fn pad_replicate(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let v = kernels::pad_replicate(self.value(*x)?, h, w)?;
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::PadReplicate(*x), rg))
    }

    fn crop(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let v = kernels::crop(self.value(*x)?, h, w)?;
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::Crop(*x), rg))
    }

    fn upsample2(&mut self, x: &Var) -> Result<Var> {
        let v = kernels::upsample_bilinear2x(self.value(*x)?);
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::Upsample(*x), rg))
    }

    fn instance_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (v, saved) = kernels::instance_norm(self.value(*x)?, self.value(*gain)?, self.value(*bias)?)?;
        let rg = self.requires(*x)? || self.requires(*gain)? || self.requires(*bias)?;
        Ok(self.push(
            v,
            Op::InstanceNorm {
                x: *x,
                gain: *gain,
                saved,
                bias: *bias,
            },
            rg,
        ))
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut refs = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            refs.push(self.value(*p)?);
            rg |= self.requires(*p)?;
        }
        let v = kernels::concat_channels(&refs)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        let v = kernels::binary(op, self.value(*a)?, self.value(*b)?)?;
        let rg = self.requires(*a)? || self.requires(*b)?;
        Ok(self.push(v, Op::Binary { op, a: *a, b: *b }, rg))
    }

    fn scale(&mut self, x: &Var, s: T) -> Result<Var> {
        let v = self.value(*x)?.map(|e| e * s);
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::Scale(*x, s), rg))
    }

    fn add_scalar(&mut self, x: &Var, s: T) -> Result<Var> {
        let v = self.value(*x)?.map(|e| e + s);
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::AddScalar(*x), rg))
    }

    fn clamp(&mut self, x: &Var, lo: T, hi: T) -> Result<Var> {
        let v = kernels::clamp(self.value(*x)?, lo, hi);
        let rg = self.requires(*x)?;
        Ok(self.push(v, Op::Clamp { x: *x, lo, hi }, rg))
    }

    fn lut_trilinear(&mut self, x: &Var, grid: &Var, c_max: T) -> Result<Var> {
        let v = kernels::lut_trilinear(self.value(*x)?, self.value(*grid)?, c_max)?;
        let rg = self.requires(*x)? || self.requires(*grid)?;
        Ok(self.push(v, Op::Lut { x: *x, grid: *grid, c_max }, rg))
    }
}

/// Gradients of one backward pass, retained for leaf variables only.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is not a differentiable leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests;
