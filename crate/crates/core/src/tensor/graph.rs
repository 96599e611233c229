use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of a node in a [`Graph`]. Ids are only meaningful for the graph
/// that issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation catalog. Scalar attributes are stored as `f64` and converted to
/// the graph's element type on use.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    /// Inputs `[x, weight]` or `[x, weight, bias]`; zero padding.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Upsample2x,
    LeakyRelu(f64),
    Sigmoid,
    Abs,
    Square,
    /// Concatenation of 4-D tensors along axis 0 (batch) or 1 (channel).
    Concat {
        axis: usize,
    },
    /// Rows `start..end` of the leading (batch) axis.
    BatchSlice {
        start: usize,
        end: usize,
    },
    Sum,
    Mean,
    /// Inputs `[z, w, lambda]` of equal shape; `w + lambda * (w - z)`,
    /// evaluated in `f64` and rounded once.
    Reorient,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x => "upsample2x",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Concat { .. } => "concat",
            Op::BatchSlice { .. } => "batch_slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reorient => "reorient",
        }
    }
}

/// What happens to a gradient as it crosses a tapped node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradTransform {
    Identity,
    Negate,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientTap {
    pub node: NodeId,
    pub transform: GradTransform,
}

struct Node<T: Element> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only record of a forward pass. Rebuilt for every step.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    taps: HashMap<usize, GradTransform>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            taps: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor; its `requires_grad` flag decides whether a
    /// gradient is reported for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = t.requires_grad();
        Ok(self.push(Op::Leaf, Vec::new(), t, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Which side of zero every input element of a non-smooth op
    /// (`leaky_relu`, `abs`) falls on, in recording order. Two passes of the
    /// same program with equal patterns lie in one smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::LeakyRelu(_) | Op::Abs))
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::UnknownNode(id.0)),
            None => Ok(()),
        }
    }

    /// Evaluates `op` on the given inputs and records it.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(inputs)?;
        let name = op.name();
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &vals)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let op = Op::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, weight, b]),
            None => self.apply(op, &[x, weight]),
        }
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Upsample2x, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.apply(Op::LeakyRelu(alpha), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[x])
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat { axis: 1 }, xs)
    }

    /// Concatenation along the batch axis.
    pub fn concat_batch(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat { axis: 0 }, xs)
    }

    pub fn batch_slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::BatchSlice { start, end }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn reorient(&mut self, z: NodeId, w: NodeId, lambda: NodeId) -> Result<NodeId> {
        self.apply(Op::Reorient, &[z, w, lambda])
    }

    /// Installs a gradient transform on `tap.node`. Forward values are untouched.
    pub fn apply_tap(&mut self, tap: GradientTap) -> Result<()> {
        self.check_ids(&[tap.node])?;
        self.taps.insert(tap.node.0, tap.transform);
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check_ids(&[loss])?;
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape.to_vec()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if let Some(t) = self.taps.get(&id) {
                match *t {
                    GradTransform::Identity => {}
                    GradTransform::Negate => g.data_mut().iter_mut().for_each(|v| *v = -*v),
                    GradTransform::Scale(c) => {
                        let c = T::from_f64(c);
                        g.data_mut().iter_mut().for_each(|v| *v = *v * c);
                    }
                }
            }
            if !node.inputs.is_empty() {
                let need: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
                let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let input_grads = backward_op(&node.op, &vals, &node.value, &g, &need)?;
                for ((inp, ig), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                    let (Some(ig), true) = (ig, needed) else { continue };
                    match &mut grads[inp.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a = *a + *b;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[id] = Some(g);
        }

        // Unreached trainable leaves get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a trainable leaf; always present after `backward`.
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.get(id).ok_or(Error::UnknownNode(id.0))
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn arity<T: Element>(op: &Op, xs: &[&Tensor<T>], allowed: &[usize]) -> Result<()> {
    if !allowed.contains(&xs.len()) {
        return Err(Error::shape(
            op.name(),
            format!("expected {allowed:?} inputs, got {}", xs.len()),
        ));
    }
    Ok(())
}

fn conv_geom<T: Element>(xs: &[&Tensor<T>], stride: usize, padding: usize) -> Result<ConvGeom> {
    let [n, c, h, w] = xs[0].dims4()?;
    let [o, ci, kh, kw] = xs[1].dims4()?;
    if ci != c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {c} channels, kernel {:?} expects {ci}",
                xs[0].shape(),
                xs[1].shape()
            ),
        ));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::shape("conv2d", format!("unsupported stride {stride}")));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
        ));
    }
    if let Some(b) = xs.get(2) {
        if b.shape() != [o] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {o} output channels", b.shape()),
            ));
        }
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        stride,
        pad: padding,
    })
}

fn forward<T: Element>(op: &Op, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        Op::Leaf => Err(Error::invalid("leaf is not an operation")),
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, xs, &[2])?;
            let f: fn(T, T) -> T = match op {
                Op::Add => |a, b| a + b,
                Op::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            xs[0].zip_map(xs[1], op.name(), f)
        }
        Op::Scale(c) => {
            arity(op, xs, &[1])?;
            let c = T::from_f64(*c);
            Ok(xs[0].map(|v| v * c))
        }
        Op::MatMul => {
            arity(op, xs, &[2])?;
            match (xs[0].shape(), xs[1].shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    Tensor::new(vec![m, n], kernels::matmul(xs[0].data(), xs[1].data(), m, k, n))
                }
                (a, b) => Err(Error::shape("matmul", format!("{a:?} x {b:?}"))),
            }
        }
        Op::Conv2d { stride, padding } => {
            arity(op, xs, &[2, 3])?;
            let g = conv_geom(xs, *stride, *padding)?;
            let out = kernels::conv2d_forward(&g, xs[0].data(), xs[1].data(), xs.get(2).map(|b| b.data()));
            Tensor::new(vec![g.n, g.o, g.out_h(), g.out_w()], out)
        }
        Op::Upsample2x => {
            arity(op, xs, &[1])?;
            let [n, c, h, w] = xs[0].dims4()?;
            Tensor::new(vec![n, c, 2 * h, 2 * w], kernels::upsample2x(xs[0].data(), n * c, h, w))
        }
        Op::LeakyRelu(alpha) => {
            arity(op, xs, &[1])?;
            let a = T::from_f64(*alpha);
            Ok(xs[0].map(|v| if v > T::zero() { v } else { a * v }))
        }
        Op::Sigmoid => {
            arity(op, xs, &[1])?;
            Ok(xs[0].map(|v| T::one() / (T::one() + (-v).exp())))
        }
        Op::Abs => {
            arity(op, xs, &[1])?;
            Ok(xs[0].map(|v| v.abs()))
        }
        Op::Square => {
            arity(op, xs, &[1])?;
            Ok(xs[0].map(|v| v * v))
        }
        Op::Concat { axis } => {
            if xs.is_empty() {
                return Err(Error::shape("concat", "no inputs"));
            }
            if *axis > 1 {
                return Err(Error::shape("concat", format!("unsupported axis {axis}")));
            }
            let first = xs[0].dims4()?;
            let mut sizes = Vec::with_capacity(xs.len());
            for x in xs {
                let d = x.dims4()?;
                let fixed_ok = (0..4).all(|i| i == *axis || d[i] == first[i]);
                if !fixed_ok {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} vs {:?}", xs[0].shape(), x.shape()),
                    ));
                }
                sizes.push(d[*axis]);
            }
            let total: usize = sizes.iter().sum();
            let mut shape = first.to_vec();
            shape[*axis] = total;
            // Blocks of each input are contiguous per outer index.
            let outer = if *axis == 0 { 1 } else { first[0] };
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for s in 0..outer {
                for (x, &c) in xs.iter().zip(&sizes) {
                    data.extend_from_slice(&x.data()[s * c * inner..(s + 1) * c * inner]);
                }
            }
            Tensor::new(shape, data)
        }
        Op::BatchSlice { start, end } => {
            arity(op, xs, &[1])?;
            let n = xs[0].batch_len();
            if xs[0].shape().is_empty() || start >= end || *end > n {
                return Err(Error::shape(
                    "batch_slice",
                    format!("range {start}..{end} of shape {:?}", xs[0].shape()),
                ));
            }
            let stride = xs[0].numel() / n;
            let mut shape = xs[0].shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, xs[0].data()[start * stride..end * stride].to_vec())
        }
        Op::Sum => {
            arity(op, xs, &[1])?;
            Ok(Tensor::scalar(xs[0].sum()))
        }
        Op::Mean => {
            arity(op, xs, &[1])?;
            if xs[0].numel() == 0 {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Ok(Tensor::scalar(xs[0].mean()))
        }
        Op::Reorient => {
            arity(op, xs, &[3])?;
            same_shape("reorient", xs[0], xs[1])?;
            same_shape("reorient", xs[0], xs[2])?;
            let data = xs[0]
                .data()
                .iter()
                .zip(xs[1].data())
                .zip(xs[2].data())
                .map(|((&z, &w), &l)| T::from_f64(reorient_value(z.as_f64(), w.as_f64(), l.as_f64())))
                .collect();
            Tensor::new(xs[0].shape().to_vec(), data)
        }
    }
}

/// `w + lambda * (w - z)`: exactly `w` at `z == w`, and for `f32` inputs
/// exactly `2w - z` at `lambda == 1`.
pub(crate) fn reorient_value(z: f64, w: f64, lambda: f64) -> f64 {
    w + lambda * (w - z)
}

fn backward_op<T: Element>(
    op: &Op,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let shaped = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data);
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => vec![
            need[0].then(|| g.zip_map(xs[1], "mul", |a, b| a * b)).transpose()?,
            need[1].then(|| g.zip_map(xs[0], "mul", |a, b| a * b)).transpose()?,
        ],
        Op::Scale(c) => {
            let c = T::from_f64(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Op::MatMul => {
            let (m, k) = (xs[0].shape()[0], xs[0].shape()[1]);
            let n = xs[1].shape()[1];
            let ga = need[0]
                .then(|| {
                    let bt = kernels::transpose(xs[1].data(), k, n);
                    shaped(xs[0], kernels::matmul(g.data(), &bt, m, n, k))
                })
                .transpose()?;
            let gb = need[1]
                .then(|| {
                    let at = kernels::transpose(xs[0].data(), m, k);
                    shaped(xs[1], kernels::matmul(&at, g.data(), k, m, n))
                })
                .transpose()?;
            vec![ga, gb]
        }
        Op::Conv2d { stride, padding } => {
            let geom = conv_geom(xs, *stride, *padding)?;
            let need_b = need.get(2).copied().unwrap_or(false);
            let cg = kernels::conv2d_backward(&geom, xs[0].data(), xs[1].data(), g.data(), (need[0], need[1], need_b));
            let mut v = vec![
                cg.dx.map(|d| shaped(xs[0], d)).transpose()?,
                cg.dw.map(|d| shaped(xs[1], d)).transpose()?,
            ];
            if xs.len() == 3 {
                v.push(cg.db.map(|d| shaped(xs[2], d)).transpose()?);
            }
            v
        }
        Op::Upsample2x => {
            let [n, c, h, w] = xs[0].dims4()?;
            vec![Some(shaped(
                xs[0],
                kernels::upsample2x_backward(g.data(), n * c, h, w),
            )?)]
        }
        Op::LeakyRelu(alpha) => {
            let a = T::from_f64(*alpha);
            vec![Some(g.zip_map(xs[0], "leaky_relu", |gv, x| {
                if x > T::zero() {
                    gv
                } else {
                    gv * a
                }
            })?)]
        }
        Op::Sigmoid => vec![Some(g.zip_map(out, "sigmoid", |gv, y| gv * y * (T::one() - y))?)],
        Op::Abs => vec![Some(g.zip_map(xs[0], "abs", |gv, x| {
            if x > T::zero() {
                gv
            } else if x < T::zero() {
                -gv
            } else {
                T::zero()
            }
        })?)],
        Op::Square => {
            let two = T::from_f64(2.0);
            vec![Some(g.zip_map(xs[0], "square", |gv, x| gv * two * x)?)]
        }
        Op::Concat { axis } => {
            let dims = out.dims4()?;
            let outer = if *axis == 0 { 1 } else { dims[0] };
            let inner: usize = dims[axis + 1..].iter().product();
            let total = dims[*axis];
            let mut offset = 0;
            let mut v = Vec::with_capacity(xs.len());
            for (x, &needed) in xs.iter().zip(need) {
                let c = x.shape()[*axis];
                if needed {
                    let mut data = Vec::with_capacity(outer * c * inner);
                    for s in 0..outer {
                        let start = (s * total + offset) * inner;
                        data.extend_from_slice(&g.data()[start..start + c * inner]);
                    }
                    v.push(Some(shaped(x, data)?));
                } else {
                    v.push(None);
                }
                offset += c;
            }
            v
        }
        Op::BatchSlice { start, .. } => {
            let stride = xs[0].numel() / xs[0].batch_len();
            let mut full = Tensor::zeros(xs[0].shape().to_vec());
            full.data_mut()[start * stride..start * stride + g.numel()].copy_from_slice(g.data());
            vec![Some(full)]
        }
        Op::Sum => {
            let gv = g.data()[0];
            vec![Some(Tensor::full(xs[0].shape().to_vec(), gv))]
        }
        Op::Mean => {
            let gv = g.data()[0] / T::from_f64(xs[0].numel() as f64);
            vec![Some(Tensor::full(xs[0].shape().to_vec(), gv))]
        }
        Op::Reorient => {
            let (z, w, l) = (xs[0], xs[1], xs[2]);
            vec![
                need[0]
                    .then(|| g.zip_map(l, "reorient", |gv, lv| -lv * gv))
                    .transpose()?,
                need[1]
                    .then(|| g.zip_map(l, "reorient", |gv, lv| (T::one() + lv) * gv))
                    .transpose()?,
                need[2]
                    .then(|| {
                        let d = w.zip_map(z, "reorient", |a, b| a - b)?;
                        g.zip_map(&d, "reorient", |gv, dv| gv * dv)
                    })
                    .transpose()?,
            ]
        }
    })
}
