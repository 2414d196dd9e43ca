//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. When at least one input
//! requires grad, the node also records the op so that [`Graph::backward`]
//! can propagate adjoints. Node ids grow monotonically, so the node vector is
//! already in topological order.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Op kinds reachable through [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Sqrt,
    Relu,
    LeakyRelu(f64),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Broadcast(Vec<usize>),
    Transpose,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geometry: ConvGeometry,
    },
    AvgPool2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Arena of tensors and the ops that produced them.
///
/// A graph is built for one forward pass, consumed by one
/// [`backward`](Graph::backward) and then dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Copy of `v`'s value as a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    /// Generic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(invalid(
                    "apply",
                    format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Div => self.div(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Sqrt => self.sqrt(inputs[0]),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::LeakyRelu(slope) => Ok(self.leaky_relu(inputs[0], slope)),
            OpKind::Softmax(axis) => self.softmax(inputs[0], axis),
            OpKind::Sum(axis) => self.sum(inputs[0], axis),
            OpKind::Mean(axis) => self.mean(inputs[0], axis),
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => self.slice(inputs[0], axis, start, end),
            OpKind::Broadcast(shape) => self.broadcast_to(inputs[0], &shape),
            OpKind::Transpose => self.transpose(inputs[0]),
        }
    }

    // ---- elementwise binary ------------------------------------------------

    /// Broadcasts both operands to a common shape.
    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = kernels::broadcast_shapes(&sa, &sb)
            .ok_or_else(|| mismatch(op, self.value(a), self.value(b)))?;
        let a = if sa == target {
            a
        } else {
            self.broadcast_to(a, &target)?
        };
        let b = if sb == target {
            b
        } else {
            self.broadcast_to(b, &target)?
        };
        Ok((a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("div", a, b)?;
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = self.zip(a, b, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), move |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    /// `max(x, lo)`; the gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Op::ClampMin(x, lo), move |v| v.max(lo))
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the two axes of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(invalid(
                "transpose",
                format!("needs 2-D input, got {:?}", t.shape()),
            ));
        }
        let out = transpose2(t);
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let out = t.reshape(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Right-aligned broadcast of `x` to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let ok = t.ndim() <= shape.len()
            && kernels::broadcast_shapes(t.shape(), shape).as_deref() == Some(shape);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let index = kernels::broadcast_index(t.shape(), shape);
        let src = t.data();
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(out, Op::Broadcast(x), &[x]))
    }

    // ---- reductions --------------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).ndim();
        if axis >= rank {
            return Err(invalid(
                op,
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        Ok(())
    }

    fn reduce(&self, x: Var, axis: usize, scale: f64) -> Tensor {
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..len {
                let src = &d[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        Tensor::new(&shape, out).expect("reduced shape")
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let out = self.reduce(x, axis, 1.0);
        Ok(self.push(out, Op::Sum(x, axis), &[x]))
    }

    /// Mean along `axis`, keeping it as a length-1 dimension.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let len = self.value(x).shape()[axis];
        let out = self.reduce(x, axis, 1.0 / len as f64);
        Ok(self.push(out, Op::Mean(x, axis), &[x]))
    }

    /// Sum of every element, as shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    fn softmax_values(t: &Tensor, axis: usize, log: bool) -> Tensor {
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for n in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + n;
                let max = (0..len)
                    .map(|i| d[idx(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..len).map(|i| (d[idx(i)] - max).exp()).sum();
                let lse = max + total.ln();
                for i in 0..len {
                    out[idx(i)] = if log {
                        d[idx(i)] - lse
                    } else {
                        (d[idx(i)] - max).exp() / total
                    };
                }
            }
        }
        Tensor::new(t.shape(), out).expect("same shape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let out = Self::softmax_values(self.value(x), axis, false);
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let out = Self::softmax_values(self.value(x), axis, true);
        Ok(self.push(out, Op::LogSoftmax(x, axis), &[x]))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(mismatch("concat", self.value(first), self.value(x)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(
                    &self.value(x).data()[o * len * inner..(o + 1) * len * inner],
                );
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        if start >= end || end > t.shape()[axis] {
            return Err(invalid(
                "slice",
                format!(
                    "range {start}..{end} invalid for axis of length {}",
                    t.shape()[axis]
                ),
            ));
        }
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        ))
    }

    // ---- images ------------------------------------------------------------

    /// Stride-1 convolution of `input` (`B×C×H×W`) with `weight`
    /// (`O×C×kh×kw`) and symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, padding: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(mismatch("conv2d", x, w));
        }
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(mismatch("conv2d", x, w));
        }
        let geometry = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            padding,
        };
        let (oh, ow) = (geometry.out_h(), geometry.out_w());
        let (plen, pix) = (geometry.patch_len(), oh * ow);
        let mut cols = vec![0.0; plen * pix];
        let mut out = vec![0.0; b * o * pix];
        for s in 0..b {
            geometry.im2col(&x.data()[s * c * h * wd..(s + 1) * c * h * wd], &mut cols);
            kernels::gemm_nn(
                w.data(),
                &cols,
                &mut out[s * o * pix..(s + 1) * o * pix],
                o,
                plen,
                pix,
            );
        }
        let out = Tensor::new(&[b, o, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                geometry,
            },
            &[input, weight],
        ))
    }

    /// Non-overlapping 2×2 average pooling over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 || t.shape()[2] % 2 != 0 || t.shape()[3] % 2 != 0 {
            return Err(invalid(
                "avg_pool2",
                format!("needs B×C×H×W with even H, W; got {:?}", t.shape()),
            ));
        }
        let (b, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = t.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Populates gradients of `loss` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t
                    .data_mut()
                    .iter_mut()
                    .zip(&delta)
                    .for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot =
                        Some(Tensor::new(self.nodes[v.0].value.shape(), delta).expect("grad shape"))
                }
            }
        };
        let map1 = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            val(v)
                .data()
                .iter()
                .zip(out.data())
                .zip(gd)
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, gd.iter().zip(tb).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let tb = val(*b).data();
                acc(*a, gd.iter().zip(tb).map(|(g, y)| g / y).collect());
                acc(
                    *b,
                    gd.iter()
                        .zip(out.data())
                        .zip(tb)
                        .map(|((g, q), y)| -g * q / y)
                        .collect(),
                );
            }
            Op::Neg(x) => acc(*x, gd.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => acc(*x, gd.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => acc(*x, gd.to_vec()),
            Op::Exp(x) => acc(*x, map1(*x, &|_, y, g| g * y)),
            Op::Log(x) => acc(*x, map1(*x, &|x, _, g| g / x)),
            Op::Sqrt(x) => acc(*x, map1(*x, &|_, y, g| 0.5 * g / y)),
            Op::Square(x) => acc(*x, map1(*x, &|x, _, g| 2.0 * g * x)),
            Op::Relu(x) => acc(*x, map1(*x, &|x, _, g| if x > 0.0 { g } else { 0.0 })),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                acc(*x, map1(*x, &|x, _, g| if x > 0.0 { g } else { s * g }))
            }
            Op::ClampMin(x, lo) => {
                let lo = *lo;
                acc(*x, map1(*x, &|x, _, g| if x > lo { g } else { 0.0 }))
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(gd, tb.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(ta.data(), gd, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => acc(*x, transpose2(g).into_data()),
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::Broadcast(x) => {
                let src = val(*x);
                let index = kernels::broadcast_index(src.shape(), out.shape());
                let mut d = vec![0.0; src.numel()];
                for (&i, &gv) in index.iter().zip(gd) {
                    d[i] += gv;
                }
                acc(*x, d);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let src = val(*x);
                let (outer, len, inner) = kernels::axis_split(src.shape(), *axis);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; src.numel()];
                for o in 0..outer {
                    for i in 0..len {
                        for n in 0..inner {
                            d[(o * len + i) * inner + n] = scale * gd[o * inner + n];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::SumAll(x) => acc(*x, vec![gd[0]; val(*x).numel()]),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for n in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + n;
                        let dot: f64 = (0..len).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            d[idx(i)] = y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for n in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + n;
                        let total: f64 = (0..len).map(|i| gd[idx(i)]).sum();
                        for i in 0..len {
                            d[idx(i)] = gd[idx(i)] - y[idx(i)].exp() * total;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    let mut d = Vec::with_capacity(val(x).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    acc(x, d);
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let src = val(*input);
                let (outer, len, inner) = kernels::axis_split(src.shape(), *axis);
                let width = out.shape()[*axis];
                let mut d = vec![0.0; src.numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    d[dst..dst + width * inner]
                        .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                acc(*input, d);
            }
            Op::Conv2d {
                input,
                weight,
                geometry,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let b = x.shape()[0];
                let o = w.shape()[0];
                let (plen, pix) = (geometry.patch_len(), geometry.out_h() * geometry.out_w());
                let img = geometry.in_channels * geometry.height * geometry.width;
                let need_x = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let mut cols = vec![0.0; plen * pix];
                let mut dw = vec![0.0; w.numel()];
                let mut dx = vec![0.0; if need_x { x.numel() } else { 0 }];
                for s in 0..b {
                    let gs = &gd[s * o * pix..(s + 1) * o * pix];
                    if need_w {
                        geometry.im2col(&x.data()[s * img..(s + 1) * img], &mut cols);
                        kernels::gemm_nt(gs, &cols, &mut dw, o, pix, plen);
                    }
                    if need_x {
                        cols.fill(0.0);
                        kernels::gemm_tn(w.data(), gs, &mut cols, plen, o, pix);
                        geometry.col2im(&cols, &mut dx[s * img..(s + 1) * img]);
                    }
                }
                if need_w {
                    acc(*weight, dw);
                }
                if need_x {
                    acc(*input, dx);
                }
            }
            Op::AvgPool2(x) => {
                let src = val(*x);
                let (b, c, h, w) = (
                    src.shape()[0],
                    src.shape()[1],
                    src.shape()[2],
                    src.shape()[3],
                );
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; src.numel()];
                for plane in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * gd[plane * oh * ow + y * ow + xx];
                            let i = plane * h * w + 2 * y * w + 2 * xx;
                            d[i] += gv;
                            d[i + 1] += gv;
                            d[i + w] += gv;
                            d[i + w + 1] += gv;
                        }
                    }
                }
                acc(*x, d);
            }
        }
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::identity(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param(t(&[2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let v = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(w, v).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn error_paths() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let neg = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(
            g.log(neg),
            Err(TensorError::Domain { op: "log", .. })
        ));
        assert!(matches!(
            g.sqrt(neg),
            Err(TensorError::Domain { op: "sqrt", .. })
        ));
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
        let c = g.constant(Tensor::scalar(1.0));
        let d = g.exp(c);
        assert!(matches!(g.backward(d), Err(TensorError::Detached)));
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.add(x, y),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2]));
        let b = g.exp(a);
        assert!(!g.requires_grad(b));
        let p = g.param(Tensor::ones(&[2]));
        let c = g.add(b, p).unwrap();
        assert!(g.requires_grad(c));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn apply_dispatches() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.apply(OpKind::Sum(0), &[x]).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let tr = g.apply(OpKind::Transpose, &[x]).unwrap();
        assert_eq!(g.value(tr).data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(g.apply(OpKind::Add, &[x]).is_err());
    }
}
