//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are stored in execution order, so a
//! reverse sweep over the node list is a valid topological order.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolGeom, ResizeGeom};
pub use super::kernels::Padding;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    BiasAdd(Var, Var),
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    AvgPool { x: Var, geom: PoolGeom },
    MaxPool { x: Var, geom: PoolGeom, argmax: Vec<usize> },
    Resize { x: Var, geom: ResizeGeom },
    GlobalAvgPool(Var),
    Mask { x: Var, mask: Vec<T> },
    Sum(Var),
    Mean(Var),
    Bce { p: Var, y: Vec<T>, eps: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | BiasAdd(a, b) => vec![*a, *b],
            AddScalar(a) | Scale(a, _) | Sigmoid(a) | Relu(a) | Transpose(a) | Reshape(a) | SoftmaxRows(a)
            | GlobalAvgPool(a) | Sum(a) | Mean(a) => vec![*a],
            SliceLast { x, .. } | AvgPool { x, .. } | MaxPool { x, .. } | Resize { x, .. } | Mask { x, .. } => {
                vec![*x]
            }
            ConcatLast(v) => v.clone(),
            Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Bce { p, .. } => vec![*p],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// Recorded computation. One graph belongs to one thread for its lifetime.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
fn as_batched(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::invalid_shape(op, format!("expected rank 2 or 3, got {shape:?}"))),
    }
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / c.max(1);
    (rows, c)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
        let finite = !cfg!(debug_assertions) || value.all_finite();
        if cfg!(debug_assertions) && inputs_finite && !finite {
            return Err(Error::Numeric(format!(
                "operation produced non-finite values from finite inputs (output shape {:?})",
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            finite,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let finite = value.all_finite();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a shared trainable tensor without copying it.
    pub fn shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T + Sync + Send) -> Result<Vec<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); da.len()];
        par::fill_with(&mut out, |i| f(da[i], db[i]));
        Ok(out)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T + Sync + Send) -> Tensor<T> {
        let ta = self.value(a);
        let d = ta.data();
        let mut out = vec![T::zero(); d.len()];
        par::fill_with(&mut out, |i| f(d[i]));
        Tensor::from_vec(ta.shape(), out).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let t = Tensor::from_vec(self.shape(a), out)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let t = Tensor::from_vec(self.shape(a), out)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let t = Tensor::from_vec(self.shape(a), out)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.unary(a, |x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.unary(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a))
    }

    /// Matrix product of `M×K` by `K×N`, or batched over a leading axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ba, m, k) = as_batched("matmul", &sa)?;
        let (bb, k2, n) = as_batched("matmul", &sb)?;
        if ba != bb || k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        self.push(Tensor::from_vec(&shape, out)?, Op::MatMul(a, b))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (b, r, c) = as_batched("transpose", &shape)?;
        let out = transpose_data(self.value(a).data(), b, r, c);
        let mut new_shape = shape.clone();
        let len = new_shape.len();
        new_shape.swap(len - 2, len - 1);
        self.push(Tensor::from_vec(&new_shape, out)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Softmax over the last axis, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, c) = last_axis(ta.shape());
        let mut out = ta.data().to_vec();
        par::for_each_chunk_mut(&mut out, c, |_, row| softmax_in_place(row));
        let t = Tensor::from_vec(ta.shape(), out)?;
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Columns `[start, start + width)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let (rows, c) = last_axis(&shape);
        if width == 0 || start + width > c {
            return Err(Error::invalid_shape(
                "slice_last",
                format!("range {start}..{} outside last axis of {shape:?}", start + width),
            ));
        }
        let d = ta.data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * c + start..r * c + start + width]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = width;
        self.push(Tensor::from_vec(&new_shape, out)?, Op::SliceLast { x: a, start })
    }

    /// Splits the channel (last) axis into two equal halves.
    pub fn channel_split(&mut self, a: Var) -> Result<(Var, Var)> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if c % 2 != 0 {
            return Err(Error::invalid_shape(
                "channel_split",
                format!("channel count {c} is odd; halves must be equal"),
            ));
        }
        Ok((self.slice_last(a, 0, c / 2)?, self.slice_last(a, c / 2, c / 2)?))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::from_vec(&shape, out)?, Op::ConcatLast(parts.to_vec()))
    }

    /// Adds a per-channel vector to every row of the last axis.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = last_axis(tx.shape());
        if tb.shape() != [c] {
            return Err(Error::shape("bias_add", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        let b = tb.data();
        par::for_each_chunk_mut(&mut out, c, |_, row| {
            for (o, v) in row.iter_mut().zip(b) {
                *o = *o + *v;
            }
        });
        let t = Tensor::from_vec(tx.shape(), out)?;
        self.push(t, Op::BiasAdd(x, bias))
    }

    /// Cross-correlation of an `N×H×W×Cin` input with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv2d bias", self.shape(kernel), self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_vec(&geom.out_shape(), out)?;
        self.push(t, Op::Conv2d { x, kernel, bias, geom })
    }

    /// Per-channel normalization over every axis but the last.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, biased variance)`; otherwise the given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (rows, c) = last_axis(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let d = tx.data();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm running stats", &shape, &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let (m, v) = channel_moments(d, rows, c);
                (m, v, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); d.len()];
        par::for_each_chunk_mut(&mut xhat, c, |r, row| {
            for ch in 0..c {
                row[ch] = (d[r * c + ch] - mean[ch]) * inv_std[ch];
            }
        });
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); d.len()];
        par::for_each_chunk_mut(&mut out, c, |r, row| {
            for ch in 0..c {
                row[ch] = g[ch] * xhat[r * c + ch] + b[ch];
            }
        });
        let t = Tensor::from_vec(&shape, out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Average pooling with stride `stride` and optional trailing partial windows.
    pub fn avg_pool(&mut self, x: Var, pool: (usize, usize), stride: (usize, usize), ceil_mode: bool) -> Result<Var> {
        let geom = PoolGeom::windowed(self.shape(x), pool, stride, ceil_mode)?;
        let out = kernels::avgpool_forward(&geom, self.value(x).data());
        self.push(Tensor::from_vec(&geom.out_shape(), out)?, Op::AvgPool { x, geom })
    }

    /// Same-padded max pooling; padded cells never win.
    pub fn max_pool(&mut self, x: Var, pool: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let geom = PoolGeom::same(self.shape(x), pool, stride)?;
        let (out, argmax) = kernels::maxpool_forward(&geom, self.value(x).data());
        self.push(Tensor::from_vec(&geom.out_shape(), out)?, Op::MaxPool { x, geom, argmax })
    }

    /// Bilinear upsampling with half-pixel centers. Downscaling is rejected.
    pub fn upsample_bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() == 4 && (target.0 < shape[1] || target.1 < shape[2]) {
            return Err(Error::invalid_shape(
                "upsample_bilinear",
                format!("target {target:?} smaller than input {}×{}", shape[1], shape[2]),
            ));
        }
        let geom = ResizeGeom::new(shape, target)?;
        let out = kernels::resize_forward(&geom, self.value(x).data());
        self.push(Tensor::from_vec(&geom.out_shape(), out)?, Op::Resize { x, geom })
    }

    /// Mean over the spatial axes of `N×H×W×C`, giving `N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid_shape("global_avg_pool", format!("expected N×H×W×C, got {shape:?}")));
        }
        let (n, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
        let d = self.value(x).data();
        let denom = T::from_usize(hw).unwrap();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..hw {
                let src = &d[(b * hw + p) * c..(b * hw + p + 1) * c];
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(src) {
                    *o = *o + *v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / denom);
        self.push(Tensor::from_vec(&[n, c], out)?, Op::GlobalAvgPool(x))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::shape("mask", tx.shape(), &[mask.len()]));
        }
        let d = tx.data();
        let out: Vec<T> = d.iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let t = Tensor::from_vec(tx.shape(), out)?;
        self.push(t, Op::Mask { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[T], eps: T) -> Result<Var> {
        let tp = self.value(p);
        let n = tp.len();
        if targets.len() != n {
            return Err(Error::shape("bce", tp.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::InvalidArgument(format!("bce target {bad} is not 0 or 1")));
        }
        let one = T::one();
        let total: T = tp
            .data()
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let pc = pi.max(eps).min(one - eps);
                -(y * pc.ln() + (one - y) * (one - pc).ln())
            })
            .sum();
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                y: targets.to_vec(),
                eps,
            },
        )
    }

    /// Mean negative log-softmax probability of the target class per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let shape = tl.shape().to_vec();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::invalid_shape("cross_entropy", format!("expected N×K with K ≥ 2, got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("class index {bad} out of range for {k} classes")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[t];
            softmax_in_place(row);
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Propagates `d loss / d node` back to every leaf that requires gradients.
    ///
    /// The graph is consumed: a second call fails until a new graph is recorded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same recording".into()));
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid_shape("backward", format!("loss must be scalar, got {shape:?}")));
        }
        self.consumed = true;
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::from_vec(&shape, vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dv.data()) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        // Release activations; leaf grads stay available.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(self.shape(v), data);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    res.push((*a, like(*a, gd.iter().zip(db).map(|(g, y)| *g * *y).collect())?));
                }
                if needs(*b) {
                    res.push((*b, like(*b, gd.iter().zip(da).map(|(g, x)| *g * *x).collect())?));
                }
            }
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Scale(a, s) => res.push((*a, g.map(|v| v * *s))),
            Op::Sigmoid(a) => {
                let y = out.data();
                let one = T::one();
                res.push((*a, like(*a, gd.iter().zip(y).map(|(g, s)| *g * *s * (one - *s)).collect())?));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let z = T::zero();
                res.push((*a, like(*a, gd.iter().zip(x).map(|(g, v)| if *v > z { *g } else { z }).collect())?));
            }
            Op::MatMul(a, b) => {
                let (ba, m, k) = as_batched("matmul", self.shape(*a))?;
                let (_, _, n) = as_batched("matmul", self.shape(*b))?;
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let mut ga = vec![T::zero(); ba * m * k];
                    for bi in 0..ba {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &db[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            T::zero(),
                        );
                    }
                    res.push((*a, like(*a, ga)?));
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); ba * k * n];
                    for bi in 0..ba {
                        T::gemm(
                            k,
                            m,
                            n,
                            &da[bi * m * k..(bi + 1) * m * k],
                            true,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            T::zero(),
                        );
                    }
                    res.push((*b, like(*b, gb)?));
                }
            }
            Op::Transpose(a) => {
                let (b, r, c) = as_batched("transpose", out.shape())?;
                res.push((*a, like(*a, transpose_data(gd, b, r, c))?));
            }
            Op::Reshape(a) => res.push((*a, like(*a, gd.to_vec())?)),
            Op::SoftmaxRows(a) => {
                let y = out.data();
                let (_, c) = last_axis(out.shape());
                let mut gx = vec![T::zero(); y.len()];
                par::for_each_chunk_mut(&mut gx, c, |r, row| {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &gd[r * c..(r + 1) * c];
                    let dot: T = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum();
                    for j in 0..c {
                        row[j] = ys[j] * (gs[j] - dot);
                    }
                });
                res.push((*a, like(*a, gx)?));
            }
            Op::SliceLast { x, start } => {
                let (rows, c) = last_axis(self.shape(*x));
                let w = *out.shape().last().unwrap();
                let mut gx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    gx[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                res.push((*x, like(*x, gx)?));
            }
            Op::ConcatLast(parts) => {
                let (rows, total) = last_axis(out.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, like(p, gp)?));
                    }
                    offset += w;
                }
            }
            Op::BiasAdd(x, b) => {
                let c = self.value(*b).len();
                let mut gb = vec![T::zero(); c];
                for row in gd.chunks(c) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a = *a + *v;
                    }
                }
                res.push((*x, g.clone()));
                res.push((*b, like(*b, gb)?));
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let (dx, dk, db) = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*kernel).data(), gd);
                res.push((*x, like(*x, dx)?));
                res.push((*kernel, like(*kernel, dk)?));
                if let Some(b) = bias {
                    res.push((*b, like(*b, db)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (rows, c) = last_axis(out.shape());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    for ch in 0..c {
                        let gv = gd[r * c + ch];
                        dgamma[ch] = dgamma[ch] + gv * xhat[r * c + ch];
                        dbeta[ch] = dbeta[ch] + gv;
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); rows * c];
                    if *batch_stats {
                        let nf = T::from_usize(rows).unwrap();
                        par::for_each_chunk_mut(&mut dx, c, |r, row| {
                            for ch in 0..c {
                                let i = r * c + ch;
                                row[ch] = gam[ch] * inv_std[ch] / nf
                                    * (nf * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        });
                    } else {
                        par::for_each_chunk_mut(&mut dx, c, |r, row| {
                            for ch in 0..c {
                                row[ch] = gd[r * c + ch] * gam[ch] * inv_std[ch];
                            }
                        });
                    }
                    res.push((*x, like(*x, dx)?));
                }
                res.push((*gamma, like(*gamma, dgamma)?));
                res.push((*beta, like(*beta, dbeta)?));
            }
            Op::AvgPool { x, geom } => res.push((*x, like(*x, kernels::avgpool_backward(geom, gd))?)),
            Op::MaxPool { x, geom, argmax } => {
                res.push((*x, like(*x, kernels::maxpool_backward(geom, argmax, gd))?))
            }
            Op::Resize { x, geom } => res.push((*x, like(*x, kernels::resize_backward(geom, gd))?)),
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let denom = T::from_usize(hw).unwrap();
                let mut gx = vec![T::zero(); n * hw * c];
                for b in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            gx[(b * hw + p) * c + ch] = gd[b * c + ch] / denom;
                        }
                    }
                }
                res.push((*x, like(*x, gx)?));
            }
            Op::Mask { x, mask } => {
                res.push((*x, like(*x, gd.iter().zip(mask).map(|(g, m)| *g * *m).collect())?));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                res.push((*x, Tensor::full(self.shape(*x), gv)));
            }
            Op::Mean(x) => {
                let gv = gd[0] / T::from_usize(self.value(*x).len()).unwrap();
                res.push((*x, Tensor::full(self.shape(*x), gv)));
            }
            Op::Bce { p, y, eps } => {
                let pd = self.value(*p).data();
                let nf = T::from_usize(pd.len()).unwrap();
                let one = T::one();
                let scale = gd[0] / nf;
                let gp = pd
                    .iter()
                    .zip(y)
                    .map(|(&pi, &yi)| {
                        if pi < *eps || pi > one - *eps {
                            T::zero()
                        } else {
                            scale * (-yi / pi + (one - yi) / (one - pi))
                        }
                    })
                    .collect();
                res.push((*p, like(*p, gp)?));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let nf = T::from_usize(targets.len()).unwrap();
                let scale = gd[0] / nf;
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] = gl[r * k + t] - scale;
                }
                res.push((*logits, like(*logits, gl)?));
            }
        }
        Ok(res)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn transpose_data<T: Scalar>(d: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for b in 0..batch {
        let (src, dst) = (&d[b * rows * cols..], &mut out[b * rows * cols..(b + 1) * rows * cols]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Per-channel mean and biased variance of a `rows × c` buffer.
///
/// Values are shifted by the first row before summing, so a constant channel
/// yields its exact value as the mean and exactly zero variance.
fn channel_moments<T: Scalar>(d: &[T], rows: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let nf = T::from_usize(rows).unwrap();
    let shift = &d[..c];
    let mut s1 = vec![T::zero(); c];
    let mut s2 = vec![T::zero(); c];
    for r in 0..rows {
        for ch in 0..c {
            let v = d[r * c + ch] - shift[ch];
            s1[ch] = s1[ch] + v;
            s2[ch] = s2[ch] + v * v;
        }
    }
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let m = s1[ch] / nf;
        mean[ch] = shift[ch] + m;
        var[ch] = (s2[ch] / nf - m * m).max(T::zero());
    }
    (mean, var)
}
