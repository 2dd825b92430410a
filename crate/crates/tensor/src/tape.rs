//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value. `backward` walks the
//! record in reverse, so inputs always precede their consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{conv2d_backward, conv2d_forward, max_pool_forward, ConvGeometry, Padding};
use crate::error::{mismatch, Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// Leakiness of the leaky ReLU used throughout the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Log,
    Abs,
    Clamp(f64, f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => {
                // split by sign so exp never overflows
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Log => T::one() / x,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Clamp(lo, hi) => {
                if x >= T::lit(lo) && x <= T::lit(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor<T>),
    AddConst(usize),
    Affine(usize, T),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Conv2d(usize, usize, ConvGeometry),
    MaxPool(usize, Vec<usize>),
    BatchNorm { x: usize, scale: usize, offset: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Unary(usize, Unary),
    Sum(usize),
    Mean(usize),
    SumTrailing(usize),
    Reshape(usize),
    ConcatChannels(usize, usize),
    Softmax(usize),
    SoftmaxCe { logits: usize, probs: Tensor<T>, onehot: Tensor<T> },
    UnitRows { x: usize, norms: Vec<T>, signs: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, readable per leaf variable.
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Ordered record of executed operations and their saved intermediates.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bias_axis_len(shape: &[usize]) -> Option<usize> {
    shape.get(1).copied()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.consumed = false;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { id: self.nodes.len() - 1, tape: self.id })
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Copy of `v` that stops gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let id = self.check(v)?;
        let value = self.nodes[id].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f).map_err(|_| {
            mismatch(name, format!("{:?} vs {:?}", self.nodes[ia].value.shape(), self.nodes[ib].value.shape()))
        })?;
        Ok((ia, ib, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Add(ia, ib), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Sub(ia, ib), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Mul(ia, ib), rg, "mul")
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.zip_map(&factor, |a, b| a * b)?;
        let rg = self.rg(ix);
        self.push(value, Op::MulConst(ix, factor), rg, "mul_const")
    }

    /// Elementwise sum with a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, term: &Tensor<T>) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.zip_map(term, |a, b| a + b)?;
        let rg = self.rg(ix);
        self.push(value, Op::AddConst(ix), rg, "add_const")
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let (s, c) = (T::lit(scale), T::lit(shift));
        let value = self.nodes[ix].value.map(|v| s * v + c);
        let rg = self.rg(ix);
        self.push(value, Op::Affine(ix, s), rg, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let xs = self.nodes[ix].value.shape().to_vec();
        let bl = self.nodes[ib].value.len();
        let c = bias_axis_len(&xs).ok_or_else(|| mismatch("add_bias", format!("input {xs:?} has no axis 1")))?;
        if self.nodes[ib].value.rank() != 1 || bl != c {
            return Err(mismatch("add_bias", format!("bias {:?} for input {xs:?}", self.nodes[ib].value.shape())));
        }
        let inner: usize = xs[2..].iter().product();
        let bd = self.nodes[ib].value.data().to_vec();
        let mut value = self.nodes[ix].value.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        let rg = self.rg(ix) || self.rg(ib);
        self.push(value, Op::AddBias(ix, ib), rg, "add_bias")
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0) {
            return Err(mismatch("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = vec![T::zero(); n * m];
        gemm(MatView::new(av.data(), n, k), MatView::new(bv.data(), k, m), T::zero(), &mut out);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Tensor::new([n, m], out)?, Op::MatMul(ia, ib), rg, "matmul")
    }

    /// Affine map `x·W + b` with row-vector inputs, `W` shaped `[in, out]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// 2-D convolution, kernel shaped `[out_channels, in_channels, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let geom = ConvGeometry::new(self.nodes[ix].value.shape(), self.nodes[ik].value.shape(), stride, padding)?;
        let value = conv2d_forward(&self.nodes[ix].value, &self.nodes[ik].value, &geom);
        let rg = self.rg(ix) || self.rg(ik);
        self.push(value, Op::Conv2d(ix, ik, geom), rg, "conv2d")
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (value, arg) = max_pool_forward(&self.nodes[ix].value, size)?;
        let rg = self.rg(ix);
        self.push(value, Op::MaxPool(ix, arg), rg, "max_pool2d")
    }

    fn bn_dims(&self, ix: usize, iscale: usize, ioffset: usize) -> Result<(usize, usize, usize)> {
        let shape = self.nodes[ix].value.shape();
        if shape.len() < 2 {
            return Err(mismatch("batch_norm", format!("input {shape:?} needs a channel axis")));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (i, what) in [(iscale, "scale"), (ioffset, "offset")] {
            if self.nodes[i].value.shape() != [c] {
                return Err(mismatch("batch_norm", format!("{what} {:?} for {c} channels", self.nodes[i].value.shape())));
            }
        }
        Ok((b, c, inner))
    }

    /// Train-mode batch normalization over every axis except axis 1.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (ix, is, io) = (self.check(x)?, self.check(scale)?, self.check(offset)?);
        let (b, c, inner) = self.bn_dims(ix, is, io)?;
        let count = b * inner;
        if count < 2 {
            return Err(TensorError::BatchTooSmall);
        }
        let xd = self.nodes[ix].value.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            mean[(i / inner) % c] += v;
        }
        let nt = T::lit(count as f64);
        mean.iter_mut().for_each(|m| *m = *m / nt);
        for (i, &v) in xd.iter().enumerate() {
            let d = v - mean[(i / inner) % c];
            var[(i / inner) % c] += d * d;
        }
        var.iter_mut().for_each(|v| *v = *v / nt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let value = self.bn_apply(ix, is, io, &mean, &inv_std, c, inner);
        let xhat = xd.iter().enumerate().map(|(i, &v)| {
            let ch = (i / inner) % c;
            (v - mean[ch]) * inv_std[ch]
        });
        let xhat: Vec<T> = xhat.collect();
        let rg = self.rg(ix) || self.rg(is) || self.rg(io);
        let out = self.push(value, Op::BatchNorm { x: ix, scale: is, offset: io, xhat, inv_std, train: true }, rg, "batch_norm")?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Eval-mode batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, scale: Var, offset: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (ix, is, io) = (self.check(x)?, self.check(scale)?, self.check(offset)?);
        let (_, c, inner) = self.bn_dims(ix, is, io)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let value = self.bn_apply(ix, is, io, mean, &inv_std, c, inner);
        let xhat: Vec<T> = self.nodes[ix]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let rg = self.rg(ix) || self.rg(is) || self.rg(io);
        self.push(value, Op::BatchNorm { x: ix, scale: is, offset: io, xhat, inv_std, train: false }, rg, "batch_norm")
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, ix: usize, is: usize, io: usize, mean: &[T], inv_std: &[T], c: usize, inner: usize) -> Tensor<T> {
        let (sd, od) = (self.nodes[is].value.data(), self.nodes[io].value.data());
        let x = &self.nodes[ix].value;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                (v - mean[ch]) * inv_std[ch] * sd[ch] + od[ch]
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(|v| u.apply(v));
        let rg = self.rg(ix);
        self.push(value, Op::Unary(ix, u), rg, u.name())
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let u = match kind {
            Activation::Relu => Unary::Relu,
            Activation::LeakyRelu => Unary::LeakyRelu(LEAKY_SLOPE),
            Activation::Tanh => Unary::Tanh,
            Activation::Sigmoid => Unary::Sigmoid,
        };
        self.unary(x, u)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(LEAKY_SLOPE))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// Natural log; a non-positive input is reported as a non-finite value.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.nodes[ix].value.sum());
        let rg = self.rg(ix);
        self.push(value, Op::Sum(ix), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        if self.nodes[ix].value.is_empty() {
            return Err(TensorError::EmptyInput { op: "mean", shape: self.nodes[ix].value.shape().to_vec() });
        }
        let value = Tensor::scalar(self.nodes[ix].value.mean());
        let rg = self.rg(ix);
        self.push(value, Op::Mean(ix), rg, "mean")
    }

    /// Sums away every axis after the first `keep` axes.
    pub fn sum_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        if keep == 0 || keep > shape.len() {
            return Err(mismatch("sum_trailing", format!("keep {keep} of {shape:?}")));
        }
        let inner: usize = shape[keep..].iter().product();
        let outer: usize = shape[..keep].iter().product();
        let xd = self.nodes[ix].value.data();
        let data = (0..outer).map(|o| xd[o * inner..(o + 1) * inner].iter().copied().sum()).collect();
        let rg = self.rg(ix);
        self.push(Tensor::new(shape[..keep].to_vec(), data)?, Op::SumTrailing(ix), rg, "sum_trailing")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(ix);
        self.push(value, Op::Reshape(ix), rg, "reshape")
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, [shape[0], rest])
    }

    /// Concatenates two `[B, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat_channels", format!("{sa:?} with {sb:?}")));
        }
        let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (ad, bd) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bd[i * cb * plane..(i + 1) * cb * plane]);
        }
        let shape = [n, ca + cb, sa[2], sa[3]];
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Tensor::new(shape, data)?, Op::ConcatChannels(ia, ib), rg, "concat_channels")
    }

    fn check_rows(&self, ix: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[ix].value.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(mismatch(op, format!("expected non-empty [rows, cols], got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of `[B, K]` logits.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let ix = self.check(logits)?;
        let (_, k) = self.check_rows(ix, "softmax")?;
        let probs = softmax_rows(&self.nodes[ix].value, k);
        let rg = self.rg(ix);
        self.push(probs, Op::Softmax(ix), rg, "softmax")
    }

    /// Mean over rows of `-y·log softmax(logits)`; gradient `(softmax - y) / B`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, onehot: &Tensor<T>) -> Result<Var> {
        let ix = self.check(logits)?;
        let (b, k) = self.check_rows(ix, "softmax_cross_entropy")?;
        if onehot.shape() != [b, k] {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits [{b}, {k}] vs targets {:?}", onehot.shape()),
            ));
        }
        let ld = self.nodes[ix].value.data();
        let mut total = T::zero();
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..k {
                let y = onehot.data()[r * k + j];
                if y != T::zero() {
                    total += y * (lse - row[j]);
                }
            }
        }
        let probs = softmax_rows(&self.nodes[ix].value, k);
        let value = Tensor::scalar(total / T::lit(b as f64));
        let rg = self.rg(ix);
        self.push(value, Op::SoftmaxCe { logits: ix, probs, onehot: onehot.clone() }, rg, "softmax_cross_entropy")
    }

    /// L2-normalizes each row and flips its sign so the first component is nonnegative.
    pub fn unit_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let (b, d) = self.check_rows(ix, "unit_rows")?;
        let xd = self.nodes[ix].value.data();
        let mut norms = Vec::with_capacity(b);
        let mut signs = Vec::with_capacity(b);
        let mut data = Vec::with_capacity(b * d);
        for r in 0..b {
            let row = &xd[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let s = if row[0] < T::zero() { -T::one() } else { T::one() };
            data.extend(row.iter().map(|&v| s * v / n));
            norms.push(n);
            signs.push(s);
        }
        let rg = self.rg(ix);
        self.push(Tensor::new([b, d], data)?, Op::UnitRows { x: ix, norms, signs }, rg, "unit_rows")
    }

    /// Inverted dropout followed by additive Gaussian noise; identity when `train` is false.
    pub fn stochastic_regularizers<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep: f64,
        noise_stddev: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::InvalidArgument(format!("dropout keep fraction {keep} not in (0, 1]")));
        }
        if !(noise_stddev >= 0.0) {
            return Err(TensorError::InvalidArgument(format!("noise stddev {noise_stddev}")));
        }
        if !train {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let mut y = x;
        if keep < 1.0 {
            let scale = T::lit(1.0 / keep);
            let mask = Tensor::from_fn(shape.clone(), |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
            y = self.mul_const(y, mask)?;
        }
        if noise_stddev > 0.0 {
            let normal = Normal::new(0.0, noise_stddev).expect("finite stddev");
            let noise = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
            y = self.add_const(y, &noise)?;
        }
        Ok(y)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every variable that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::ones(self.nodes[il].value.shape().to_vec()));
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        // Interior nodes keep no gradient; only leaves are reported.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.consumed = true;
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Tensor<T>>], id: usize, t: Tensor<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |id: usize| &nodes[id].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
            Op::MulConst(a, f) => acc(grads, *a, g.zip_map(f, |x, y| x * y).unwrap()),
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Affine(a, s) => {
                let s = *s;
                acc(grads, *a, g.map(|v| v * s));
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                if nodes[*b].requires_grad {
                    let shape = val(*x).shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (k, &v) in g.data().iter().enumerate() {
                        db[(k / inner) % c] += v;
                    }
                    acc(grads, *b, Tensor::new([c], db).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
                let gm = MatView::new(g.data(), n, m);
                if nodes[*a].requires_grad {
                    let mut da = vec![T::zero(); n * k];
                    gemm(gm, MatView::new(bv.data(), k, m).t(), T::zero(), &mut da);
                    acc(grads, *a, Tensor::new([n, k], da).unwrap());
                }
                if nodes[*b].requires_grad {
                    let mut db = vec![T::zero(); k * m];
                    gemm(MatView::new(av.data(), n, k).t(), gm, T::zero(), &mut db);
                    acc(grads, *b, Tensor::new([k, m], db).unwrap());
                }
            }
            Op::Conv2d(x, k, geom) => {
                let (dx, dk) =
                    conv2d_backward(val(*x), val(*k), g, geom, nodes[*x].requires_grad, nodes[*k].requires_grad);
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    acc(grads, *k, dk);
                }
            }
            Op::MaxPool(x, arg) => {
                let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                let d = dx.data_mut();
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    d[src] += gv;
                }
                acc(grads, *x, dx);
            }
            Op::BatchNorm { x, scale, offset, xhat, inv_std, train } => {
                let shape = val(*x).shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let count = T::lit((shape[0] * inner) as f64);
                let sd = val(*scale).data();
                let mut dscale = vec![T::zero(); c];
                let mut doffset = vec![T::zero(); c];
                for (k, &gv) in g.data().iter().enumerate() {
                    let ch = (k / inner) % c;
                    dscale[ch] += gv * xhat[k];
                    doffset[ch] += gv;
                }
                if nodes[*x].requires_grad {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| {
                            let ch = (k / inner) % c;
                            if *train {
                                // dxhat = g*scale; dx = inv_std/N (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                                let dxhat = gv * sd[ch];
                                let sum_dxhat = doffset[ch] * sd[ch];
                                let sum_dxhat_xhat = dscale[ch] * sd[ch];
                                inv_std[ch] / count * (count * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat)
                            } else {
                                gv * sd[ch] * inv_std[ch]
                            }
                        })
                        .collect();
                    acc(grads, *x, Tensor::new(shape.to_vec(), data).unwrap());
                }
                acc(grads, *scale, Tensor::new([c], dscale).unwrap());
                acc(grads, *offset, Tensor::new([c], doffset).unwrap());
            }
            Op::Unary(x, u) => {
                let (xv, yv) = (val(*x), &nodes[i].value);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                    .collect();
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Sum(x) => acc(grads, *x, Tensor::full(val(*x).shape().to_vec(), g.item())),
            Op::Mean(x) => {
                let n = T::lit(val(*x).len() as f64);
                acc(grads, *x, Tensor::full(val(*x).shape().to_vec(), g.item() / n));
            }
            Op::SumTrailing(x) => {
                let xv = val(*x);
                let inner = xv.len() / g.len().max(1);
                let gd = g.data();
                acc(grads, *x, Tensor::from_fn(xv.shape().to_vec(), |k| gd[k / inner]));
            }
            Op::Reshape(x) => acc(grads, *x, g.clone().reshape(val(*x).shape().to_vec()).unwrap()),
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                acc(grads, *a, Tensor::new(sa.to_vec(), da).unwrap());
                acc(grads, *b, Tensor::new(sb.to_vec(), db).unwrap());
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let k = y.dim(1);
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.dim(0) {
                    let (yr, gr) = (&y.data()[r * k..(r + 1) * k], &g.data()[r * k..(r + 1) * k]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dx[r * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SoftmaxCe { logits, probs, onehot } => {
                let scale = g.item() / T::lit(probs.dim(0) as f64);
                acc(grads, *logits, probs.zip_map(onehot, |p, y| (p - y) * scale).unwrap());
            }
            Op::UnitRows { x, norms, signs } => {
                let y = &nodes[i].value;
                let d = y.dim(1);
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.dim(0) {
                    let (yr, gr) = (&y.data()[r * d..(r + 1) * d], &g.data()[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = signs[r] / norms[r] * (gr[j] - yr[j] * dot);
                    }
                }
                acc(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}
