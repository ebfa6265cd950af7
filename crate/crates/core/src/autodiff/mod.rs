//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Leaves are either constants or gradient-carrying inputs (trainable
//! parameters, or inputs under test). [`Graph::backward`] walks the tape in
//! reverse and returns a gradient for every gradient-carrying leaf.
//!
//! Graphs are rebuilt each training step; recurrent unrolls record one set of
//! nodes per timestep.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use kernels::{Conv2dCfg, Geometry, Padding};
use kernels::NormSaved;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a normalization op uses statistics of the current batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats<'a, R> {
    Batch,
    Fixed { mean: &'a [R], var: &'a [R] },
}

enum Op<R> {
    Leaf,
    Conv2d { x: Var, k: Var, geom: Geometry },
    Depthwise { x: Var, k: Var, geom: Geometry },
    BiasAdd { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<R>, detach_stats: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<R>, batch_stats: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Var },
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<R>, labels: Vec<usize> },
    Sum(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Single-writer operation tape.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the gradient-carrying leaves, indexed by [`Var`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of `v`; an all-zero tensor when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<R> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// `None` when no gradient reached `v`.
    pub fn try_get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }
}

fn same_shape<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Gradient-carrying leaf.
    pub fn input(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Leaf whose gradient is tracked only when `trainable`.
    pub fn leaf(&mut self, t: Tensor<R>, trainable: bool) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, trainable)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, cfg: Conv2dCfg) -> Result<Var> {
        let [n, h, w, cin] = self.value(x).dims4()?;
        let [kh, kw, kcin, cout] = self.value(k).dims4()?;
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("kernel expects {kcin} input channels, input has {cin}")));
        }
        let geom = Geometry::new(h, w, kh, kw, cfg)?;
        let out = kernels::conv2d_forward(self.value(x).data(), n, cin, self.value(k).data(), cout, &geom);
        let t = Tensor::new(vec![n, geom.oh, geom.ow, cout], out)?;
        let ng = self.any_grad(&[x, k]);
        self.push("conv2d", t, Op::Conv2d { x, k, geom }, ng)
    }

    /// Per-channel convolution with kernel `(kh, kw, cin, mult)`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, cfg: Conv2dCfg) -> Result<Var> {
        let [n, h, w, cin] = self.value(x).dims4()?;
        let [kh, kw, kcin, mult] = self.value(k).dims4()?;
        if kcin != cin {
            return Err(Error::shape("depthwise_conv2d", format!("kernel depth {kcin} vs input channels {cin}")));
        }
        let geom = Geometry::new(h, w, kh, kw, cfg)?;
        let out = kernels::depthwise_forward(self.value(x).data(), n, cin, self.value(k).data(), mult, &geom);
        let t = Tensor::new(vec![n, geom.oh, geom.ow, cin * mult], out)?;
        let ng = self.any_grad(&[x, k]);
        self.push("depthwise_conv2d", t, Op::Depthwise { x, k, geom }, ng)
    }

    /// Depthwise spatial stage followed by a 1×1 pointwise stage
    /// `(1, 1, cin·mult, cout)`.
    pub fn separable_conv2d(&mut self, x: Var, depthwise: Var, pointwise: Var, cfg: Conv2dCfg) -> Result<Var> {
        let d = self.depthwise_conv2d(x, depthwise, cfg)?;
        let [ph, pw, ..] = self.value(pointwise).dims4()?;
        if (ph, pw) != (1, 1) {
            return Err(Error::shape("separable_conv2d", format!("pointwise kernel must be 1x1, got {ph}x{pw}")));
        }
        self.conv2d(d, pointwise, Conv2dCfg::same())
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        let bv = self.value(b);
        if bv.len() != c {
            return Err(Error::shape("bias_add", format!("bias of {} for {c} channels", bv.len())));
        }
        let bd = bv.data();
        let out: Vec<R> = xv.data().iter().enumerate().map(|(i, &v)| v + bd[i % c]).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x, b]);
        self.push("bias_add", t, Op::BiasAdd { x, b }, ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let out: Vec<R> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let ng = self.any_grad(&[a, b]);
        self.push(name, t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Result<Var> {
        let t = self.value(x).map(f);
        let ng = self.any_grad(&[x]);
        self.push(name, t, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, R::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(R::zero()), Op::Relu(x))
    }

    /// Per-sample normalization over all non-batch axes, then per-channel
    /// `gamma`/`beta`. `detach_stats` stops gradients through the mean and
    /// variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R, detach_stats: bool) -> Result<Var> {
        if eps <= R::zero() {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let n = xv.shape()[0];
        let c = *xv.shape().last().unwrap();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", format!("gamma/beta of {}/{} for {c} channels", gv.len(), bv.len())));
        }
        let (y, saved) = kernels::layer_norm_forward(xv.data(), n, c, gv.data(), bv.data(), eps);
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, saved, detach_stats }, ng)
    }

    /// Per-channel normalization over every axis but the last. Returns the
    /// output and the `(mean, var)` that were applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: R,
        stats: NormStats<'_, R>,
    ) -> Result<(Var, Vec<R>, Vec<R>)> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("batch_norm", format!("gamma/beta of {}/{} for {c} channels", gv.len(), bv.len())));
        }
        let fixed = match stats {
            NormStats::Batch => None,
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics width"));
                }
                Some((mean, var))
            }
        };
        let (y, saved) = kernels::batch_norm_forward(xv.data(), c, gv.data(), bv.data(), eps, fixed);
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let ng = self.any_grad(&[x, gamma, beta]);
        let batch_stats = fixed.is_none();
        let v = self.push("batch_norm", t, Op::BatchNorm { x, gamma, beta, saved, batch_stats }, ng)?;
        Ok((v, mean, var))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4()?;
        let geom = Geometry::new(h, w, window, window, Conv2dCfg { stride, dilation: 1, padding: Padding::Same })?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n, c, &geom);
        let t = Tensor::new(vec![n, geom.oh, geom.ow, c], out)?;
        let ng = self.any_grad(&[x]);
        self.push("max_pool2d", t, Op::MaxPool { x, argmax }, ng)
    }

    /// `(n, h, w, c) -> (n, c)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4()?;
        let area = R::from_usize(h * w).unwrap();
        let mut out = vec![R::zero(); n * c];
        for (s, plane) in self.value(x).data().chunks_exact(h * w * c.max(1)).enumerate() {
            for px in plane.chunks_exact(c) {
                for (o, &v) in out[s * c..][..c].iter_mut().zip(px) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= area);
        let t = Tensor::new(vec![n, c], out)?;
        let ng = self.any_grad(&[x]);
        self.push("global_avg_pool", t, Op::GlobalAvgPool(x), ng)
    }

    /// `x (n, in) · w (in, out) + b (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, din] = self.value(x).dims2()?;
        let [win, dout] = self.value(w).dims2()?;
        if win != din || self.value(b).len() != dout {
            return Err(Error::shape(
                "dense",
                format!("x {:?}, w {:?}, b {:?}", self.value(x).shape(), self.value(w).shape(), self.value(b).shape()),
            ));
        }
        let bd = self.value(b).data();
        let mut out: Vec<R> = (0..n * dout).map(|i| bd[i % dout]).collect();
        R::gemm(
            n,
            din,
            dout,
            R::one(),
            (self.value(x).data(), din as isize, 1),
            (self.value(w).data(), dout as isize, 1),
            R::one(),
            (&mut out, dout as isize, 1),
        );
        let t = Tensor::new(vec![n, dout], out)?;
        let ng = self.any_grad(&[x, w, b]);
        self.push("dense", t, Op::Dense { x, w, b }, ng)
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {c}", start + len)));
        }
        let out: Vec<R> = xv.data().chunks_exact(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        let ng = self.any_grad(&[x]);
        self.push("slice_channels", t, Op::Slice { x, start }, ng)
    }

    /// Concatenation along the last axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let lead = &self.value(*first).shape()[..self.value(*first).rank() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_channels", format!("{lead:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * wd..][..wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let ng = self.any_grad(parts);
        self.push("concat_channels", t, Op::Concat(parts.to_vec()), ng)
    }

    /// Mean softmax cross-entropy of `(n, classes)` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {n}x{k} logits", labels.len())));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = R::zero();
        for (row, &l) in probs.chunks_exact(k).zip(labels) {
            loss -= row[l].max(R::min_positive_value()).ln();
        }
        loss /= R::from_usize(n).unwrap();
        let ng = self.any_grad(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        let mut leaf_grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(i, node, gy, &mut grads, &mut leaf_grads)?;
        }
        Ok(Gradients { grads: leaf_grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(
        &self,
        i: usize,
        node: &Node<R>,
        gy: Vec<R>,
        grads: &mut [Option<Vec<R>>],
        leaf_grads: &mut [Option<Tensor<R>>],
    ) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Vec<R>| {
            match grads[v.0].as_mut() {
                None => grads[v.0] = Some(delta),
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            }
        };
        match &node.op {
            Op::Leaf => {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), gy)?);
            }
            Op::Conv2d { x, k, geom } => {
                let [n, _, _, cin] = self.value(*x).dims4()?;
                let cout = self.value(*k).shape()[3];
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    self.value(*k).data(),
                    cout,
                    geom,
                    &gy,
                    wants(*x),
                    wants(*k),
                );
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dk {
                    acc(*k, d);
                }
            }
            Op::Depthwise { x, k, geom } => {
                let [n, _, _, cin] = self.value(*x).dims4()?;
                let mult = self.value(*k).shape()[3];
                let (dx, dk) = kernels::depthwise_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    self.value(*k).data(),
                    mult,
                    geom,
                    &gy,
                    wants(*x),
                    wants(*k),
                );
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dk {
                    acc(*k, d);
                }
            }
            Op::BiasAdd { x, b } => {
                if wants(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![R::zero(); c];
                    for row in gy.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    acc(*b, db);
                }
                if wants(*x) {
                    acc(*x, gy);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, gy.clone());
                }
                if wants(*b) {
                    acc(*b, gy);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, gy.clone());
                }
                if wants(*b) {
                    acc(*b, gy.into_iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, gy.iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect());
                }
                if wants(*b) {
                    acc(*b, gy.iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Sigmoid(x) => {
                let d = gy.iter().zip(node.value.data()).map(|(&g, &y)| g * y * (R::one() - y)).collect();
                acc(*x, d);
            }
            Op::Tanh(x) => {
                let d = gy.iter().zip(node.value.data()).map(|(&g, &y)| g * (R::one() - y * y)).collect();
                acc(*x, d);
            }
            Op::Relu(x) => {
                let d = gy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > R::zero() { g } else { R::zero() })
                    .collect();
                acc(*x, d);
            }
            Op::LayerNorm { x, gamma, beta, saved, detach_stats } => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let c = *xv.shape().last().unwrap();
                let (dx, dg, db) =
                    kernels::layer_norm_backward(&gy, n, c, self.value(*gamma).data(), saved, *detach_stats);
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*gamma) {
                    acc(*gamma, dg);
                }
                if wants(*beta) {
                    acc(*beta, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved, batch_stats } => {
                let c = *self.value(*x).shape().last().unwrap();
                let (dx, dg, db) =
                    kernels::batch_norm_backward(&gy, c, self.value(*gamma).data(), saved, *batch_stats);
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*gamma) {
                    acc(*gamma, dg);
                }
                if wants(*beta) {
                    acc(*beta, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![R::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(&gy) {
                    if src != usize::MAX {
                        dx[src] += g;
                    }
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let [n, h, w, c] = self.value(*x).dims4()?;
                let area = R::from_usize(h * w).unwrap();
                let mut dx = vec![R::zero(); n * h * w * c];
                for (s, plane) in dx.chunks_exact_mut(h * w * c.max(1)).enumerate() {
                    for px in plane.chunks_exact_mut(c) {
                        for (d, &g) in px.iter_mut().zip(&gy[s * c..][..c]) {
                            *d = g / area;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Dense { x, w, b } => {
                let [n, din] = self.value(*x).dims2()?;
                let dout = self.value(*b).len();
                if wants(*b) {
                    let mut db = vec![R::zero(); dout];
                    for row in gy.chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    acc(*b, db);
                }
                if wants(*w) {
                    let mut dw = vec![R::zero(); din * dout];
                    R::gemm(
                        din,
                        n,
                        dout,
                        R::one(),
                        (self.value(*x).data(), 1, din as isize),
                        (&gy, dout as isize, 1),
                        R::zero(),
                        (&mut dw, dout as isize, 1),
                    );
                    acc(*w, dw);
                }
                if wants(*x) {
                    let mut dx = vec![R::zero(); n * din];
                    R::gemm(
                        n,
                        dout,
                        din,
                        R::one(),
                        (&gy, dout as isize, 1),
                        (self.value(*w).data(), 1, dout as isize),
                        R::zero(),
                        (&mut dx, din as isize, 1),
                    );
                    acc(*x, dx);
                }
            }
            Op::Slice { x, start } => {
                let c = *self.value(*x).shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![R::zero(); self.value(*x).len()];
                for (row, grow) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let wd = *self.value(*p).shape().last().unwrap();
                    if wants(*p) {
                        let d: Vec<R> = gy.chunks_exact(total).flat_map(|row| row[offset..offset + wd].iter().copied()).collect();
                        acc(*p, d);
                    }
                    offset += wd;
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len();
                let scale = gy[0] / R::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (row, &l) in d.chunks_exact_mut(k).zip(labels) {
                    row[l] -= R::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, d);
            }
            Op::Sum(x) => {
                acc(*x, vec![gy[0]; self.value(*x).len()]);
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a flat `(rows, k)` buffer.
pub fn softmax_rows<R: Real>(logits: &[R], k: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let exps: Vec<R> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: R = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
