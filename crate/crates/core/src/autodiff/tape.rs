//! Define-by-run tape: every primitive appends one node holding its output
//! value, the ids of its inputs and whatever forward data its gradient rule
//! needs. Nodes are appended in evaluation order, so a reverse sweep over the
//! node list is a valid topological order for backpropagation.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative expressed through the output value `y = apply(x)`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Dot(Var, Var),
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: [usize; 2],
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    PadSpatial {
        input: Var,
        pad: usize,
    },
    Pool {
        input: Var,
        size: usize,
        axis: usize,
        mode: PoolMode,
        // flat input index of each output's maximum (max mode only)
        argmax: Vec<usize>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    LogSoftmax(Var),
    Softmax(Var),
    Nll {
        input: Var,
        target: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, or `None` if `v`
    /// does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable nodes.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::MatMul(a, b) | Op::MatVec(a, b) | Op::Dot(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Conv1d { input, kernel, .. } | Op::Conv2d { input, kernel, .. } => {
                self.requires_grad(*input) || self.requires_grad(*kernel)
            }
            Op::ChannelBias { input, bias } => {
                self.requires_grad(*input) || self.requires_grad(*bias)
            }
            Op::Concat { a, b, .. } => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Stack(vs) => vs.iter().any(|v| self.requires_grad(*v)),
            Op::Scale(x, _)
            | Op::PadSpatial { input: x, .. }
            | Op::Pool { input: x, .. }
            | Op::Activation { input: x, .. }
            | Op::Slice { input: x, .. }
            | Op::Reshape(x)
            | Op::LogSoftmax(x)
            | Op::Softmax(x)
            | Op::Nll { input: x, .. }
            | Op::Sum(x) => self.requires_grad(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (inputs, masks, fixed weights).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Rank-2 matrix product `[m×k] × [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// Matrix-vector product `[m×k] × [k] → [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Dimension {
                op: "matvec",
                lhs: sw.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (m, k) = (sw[0], sw[1]);
        let (dw, dx) = (self.data(w), self.data(x));
        let out = (0..m)
            .map(|i| dw[i * k..(i + 1) * k].iter().zip(dx).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Tensor::from_parts(vec![m], out), Op::MatVec(w, x), "matvec")
    }

    /// Inner product of two rank-1 tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    /// Valid (unpadded) strided cross-correlation.
    ///
    /// `input` is `[channels × length]` with kernels `[out × in × k]`, or
    /// `[channels × h × w]` with kernels `[out × in × kh × kw]`. `stride`
    /// holds one entry per spatial axis.
    pub fn conv(&mut self, input: Var, kernel: Var, stride: &[usize]) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let spatial = si.len().saturating_sub(1);
        if !(spatial == 1 || spatial == 2) || sk.len() != si.len() + 1 {
            return Err(Error::shape(
                "conv",
                format!("unsupported input {:?} / kernel {:?} ranks", si, sk),
            ));
        }
        if stride.len() != spatial {
            return Err(Error::argument(
                "conv",
                format!("expected {} stride entries, got {}", spatial, stride.len()),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::argument("conv", "stride must be positive"));
        }
        if sk[1] != si[0] {
            return Err(Error::Dimension {
                op: "conv",
                lhs: si,
                rhs: sk,
            });
        }
        for axis in 0..spatial {
            if sk[2 + axis] > si[1 + axis] || sk[2 + axis] == 0 {
                return Err(Error::shape(
                    "conv",
                    format!("kernel {:?} larger than input {:?}", sk, si),
                ));
            }
        }
        if spatial == 1 {
            self.conv1d(input, kernel, stride[0])
        } else {
            self.conv2d(input, kernel, [stride[0], stride[1]])
        }
    }

    fn conv1d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        let (c_in, len) = (si[0], si[1]);
        let (c_out, k) = (sk[0], sk[2]);
        let out_len = (len - k) / stride + 1;
        let (x, w) = (self.data(input), self.data(kernel));
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let orow = &mut out[o * out_len..(o + 1) * out_len];
            for c in 0..c_in {
                let xrow = &x[c * len..(c + 1) * len];
                for j in 0..k {
                    let wv = w[(o * c_in + c) * k + j];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        *ov += wv * xrow[t * stride + j];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![c_out, out_len], out);
        self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                stride,
            },
            "conv",
        )
    }

    fn conv2d(&mut self, input: Var, kernel: Var, stride: [usize; 2]) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ho, wo) = ((h - kh) / stride[0] + 1, (w - kw) / stride[1] + 1);
        let (x, kern) = (self.data(input), self.data(kernel));
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..c_in {
                let xplane = &x[c * h * w..(c + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = kern[((o * c_in + c) * kh + ki) * kw + kj];
                        for y in 0..ho {
                            let xrow = &xplane[(y * stride[0] + ki) * w..];
                            let orow = &mut oplane[y * wo..(y + 1) * wo];
                            for (xo, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * xrow[xo * stride[1] + kj];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![c_out, ho, wo], out);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            "conv",
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C × ...]` input.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (si, sb) = (self.shape(input), self.shape(bias));
        if si.is_empty() || sb.len() != 1 || sb[0] != si[0] {
            return Err(Error::Dimension {
                op: "channel_bias",
                lhs: si.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner: usize = si[1..].iter().product();
        let b = self.data(bias);
        let data = self
            .data(input)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / inner.max(1)])
            .collect();
        let value = Tensor::from_parts(si.to_vec(), data);
        self.push(value, Op::ChannelBias { input, bias }, "channel_bias")
    }

    /// Zero-pads the spatial axes of a `[C × L]` or `[C × H × W]` tensor by
    /// `pad` on every side.
    pub fn pad_spatial(&mut self, input: Var, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let x = self.data(input);
        let value = match si.len() {
            2 => {
                let (c, l) = (si[0], si[1]);
                let lp = l + 2 * pad;
                let mut out = vec![0.0; c * lp];
                for ch in 0..c {
                    out[ch * lp + pad..ch * lp + pad + l].copy_from_slice(&x[ch * l..(ch + 1) * l]);
                }
                Tensor::from_parts(vec![c, lp], out)
            }
            3 => {
                let (c, h, w) = (si[0], si[1], si[2]);
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut out = vec![0.0; c * hp * wp];
                for ch in 0..c {
                    for y in 0..h {
                        let dst = (ch * hp + y + pad) * wp + pad;
                        let src = (ch * h + y) * w;
                        out[dst..dst + w].copy_from_slice(&x[src..src + w]);
                    }
                }
                Tensor::from_parts(vec![c, hp, wp], out)
            }
            _ => {
                return Err(Error::shape(
                    "pad_spatial",
                    format!("expected rank 2 or 3, got {:?}", si),
                ))
            }
        };
        self.push(value, Op::PadSpatial { input, pad }, "pad_spatial")
    }

    /// Non-overlapping pooling of `size` consecutive entries along `axis`.
    /// The axis length must be divisible by `size`.
    pub fn pool(&mut self, input: Var, size: usize, axis: usize, mode: PoolMode) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if size == 0 {
            return Err(Error::argument("pool", "size must be positive"));
        }
        if axis >= si.len() {
            return Err(Error::argument(
                "pool",
                format!("axis {} out of range for shape {:?}", axis, si),
            ));
        }
        let (outer, n, inner) = split_axis(&si, axis);
        if n % size != 0 {
            return Err(Error::shape(
                "pool",
                format!("axis {} of length {} not divisible by {}", axis, n, size),
            ));
        }
        let m = n / size;
        let x = self.data(input);
        let mut out = vec![0.0; outer * m * inner];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; out.len()];
        }
        for o in 0..outer {
            for j in 0..m {
                for i in 0..inner {
                    let oi = (o * m + j) * inner + i;
                    let base = (o * n + j * size) * inner + i;
                    match mode {
                        PoolMode::Max => {
                            let mut best = base;
                            for s in 1..size {
                                let idx = base + s * inner;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            out[oi] = x[best];
                            argmax[oi] = best;
                        }
                        PoolMode::Avg => {
                            let total: f64 = (0..size).map(|s| x[base + s * inner]).sum();
                            out[oi] = total / size as f64;
                        }
                    }
                }
            }
        }
        let mut shape = si;
        shape[axis] = m;
        let value = Tensor::from_parts(shape, out);
        self.push(
            value,
            Op::Pool {
                input,
                size,
                axis,
                mode,
                argmax,
            },
            "pool",
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let value = self.value(input).map(|v| kind.apply(v));
        self.push(value, Op::Activation { input, kind }, "activation")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Joins two tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::Dimension {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, na, inner) = split_axis(&sa, axis);
        let nb = sb[axis];
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for o in 0..outer {
            out.extend_from_slice(&xa[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&xb[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, axis }, "concat")
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if axis >= si.len() {
            return Err(Error::argument(
                "slice",
                format!("axis {} out of range for shape {:?}", axis, si),
            ));
        }
        let (outer, n, inner) = split_axis(&si, axis);
        if start + len > n {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                len: n,
            });
        }
        let x = self.data(input);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = si;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { input, axis, start }, "slice")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.push(value, Op::Reshape(input), "reshape")
    }

    /// Packs one-element tensors into a rank-1 vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            out.push(self.value(v).item().map_err(|_| {
                Error::argument("stack", format!("item of shape {:?} is not a scalar", self.shape(v)))
            })?);
        }
        self.push(Tensor::vector(out), Op::Stack(items.to_vec()), "stack")
    }

    /// Max-shifted log-softmax of a non-empty rank-1 tensor.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.rank1_nonempty("log_softmax", logits)?;
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = Tensor::vector(x.iter().map(|v| v - lse).collect());
        self.push(value, Op::LogSoftmax(logits), "log_softmax")
    }

    /// Max-shifted softmax of a non-empty rank-1 tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.rank1_nonempty("softmax", logits)?;
        let value = Tensor::vector(softmax_values(x));
        self.push(value, Op::Softmax(logits), "softmax")
    }

    fn rank1_nonempty(&self, op: &'static str, v: Var) -> Result<&[f64]> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::shape(op, format!("expected rank 1, got {:?}", s)));
        }
        if s[0] == 0 {
            return Err(Error::argument(op, "empty input"));
        }
        Ok(self.data(v))
    }

    /// Negative log-likelihood `-log_probs[target]` as a scalar.
    pub fn nll(&mut self, log_probs: Var, target: usize) -> Result<Var> {
        let x = self.data(log_probs);
        if self.shape(log_probs).len() != 1 {
            return Err(Error::shape(
                "nll",
                format!("expected rank 1, got {:?}", self.shape(log_probs)),
            ));
        }
        if target >= x.len() {
            return Err(Error::Index {
                op: "nll",
                index: target,
                len: x.len(),
            });
        }
        let value = Tensor::scalar(-x[target]);
        self.push(
            value,
            Op::Nll {
                input: log_probs,
                target,
            },
            "nll",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::argument("mean", "empty input"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a one-element `output`, seeded with gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::argument(
                "backward",
                format!("output of shape {:?} is not a scalar", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(x) {
                        let data = gd.iter().zip(self.data(y)).map(|(g, o)| g * o).collect();
                        self.accumulate(grads, x, Tensor::from_parts(g.shape().to_vec(), data));
                    }
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = (0..n).map(|j| gd[i * n + j] * db[p * n + j]).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * gd[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::MatVec(w, x) => {
                let sw = self.shape(*w);
                let (m, k) = (sw[0], sw[1]);
                let (dw, dx) = (self.data(*w), self.data(*x));
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; m * k];
                    for i in 0..m {
                        for (o, xv) in gw[i * k..(i + 1) * k].iter_mut().zip(dx) {
                            *o = gd[i] * xv;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(vec![m, k], gw));
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; k];
                    for i in 0..m {
                        for (o, wv) in gx.iter_mut().zip(&dw[i * k..(i + 1) * k]) {
                            *o += wv * gd[i];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![k], gx));
                }
            }
            Op::Dot(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(x) {
                        let gx = self.value(y).map(|v| v * gd[0]);
                        self.accumulate(grads, x, gx);
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                stride,
            } => {
                let (si, sk) = (self.shape(*input), self.shape(*kernel));
                let (c_in, len) = (si[0], si[1]);
                let (c_out, k) = (sk[0], sk[2]);
                let out_len = g.shape()[1];
                let (x, w) = (self.data(*input), self.data(*kernel));
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*kernel);
                let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
                let mut gw = vec![0.0; if need_w { w.len() } else { 0 }];
                for o in 0..c_out {
                    let grow = &gd[o * out_len..(o + 1) * out_len];
                    for c in 0..c_in {
                        let xrow = &x[c * len..(c + 1) * len];
                        for j in 0..k {
                            let widx = (o * c_in + c) * k + j;
                            if need_w {
                                gw[widx] = grow
                                    .iter()
                                    .enumerate()
                                    .map(|(t, gv)| gv * xrow[t * stride + j])
                                    .sum();
                            }
                            if need_x {
                                let wv = w[widx];
                                let gxrow = &mut gx[c * len..(c + 1) * len];
                                for (t, gv) in grow.iter().enumerate() {
                                    gxrow[t * stride + j] += wv * gv;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *input, Tensor::from_parts(si.to_vec(), gx));
                }
                if need_w {
                    self.accumulate(grads, *kernel, Tensor::from_parts(sk.to_vec(), gw));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let (si, sk) = (self.shape(*input), self.shape(*kernel));
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
                let (ho, wo) = (g.shape()[1], g.shape()[2]);
                let (x, kern) = (self.data(*input), self.data(*kernel));
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*kernel);
                let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
                let mut gw = vec![0.0; if need_w { kern.len() } else { 0 }];
                for o in 0..c_out {
                    let gplane = &gd[o * ho * wo..(o + 1) * ho * wo];
                    for c in 0..c_in {
                        let xplane = &x[c * h * w..(c + 1) * h * w];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let widx = ((o * c_in + c) * kh + ki) * kw + kj;
                                let wv = kern[widx];
                                let mut acc = 0.0;
                                for y in 0..ho {
                                    let row = (y * stride[0] + ki) * w;
                                    let grow = &gplane[y * wo..(y + 1) * wo];
                                    for (xo, gv) in grow.iter().enumerate() {
                                        let xi = row + xo * stride[1] + kj;
                                        if need_w {
                                            acc += gv * xplane[xi];
                                        }
                                        if need_x {
                                            gx[c * h * w + xi] += wv * gv;
                                        }
                                    }
                                }
                                if need_w {
                                    gw[widx] = acc;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *input, Tensor::from_parts(si.to_vec(), gx));
                }
                if need_w {
                    self.accumulate(grads, *kernel, Tensor::from_parts(sk.to_vec(), gw));
                }
            }
            Op::ChannelBias { input, bias } => {
                self.accumulate(grads, *input, g.clone());
                if self.requires_grad(*bias) {
                    let c = self.shape(*bias)[0];
                    let inner = (gd.len() / c.max(1)).max(1);
                    let gb = (0..c).map(|ch| gd[ch * inner..(ch + 1) * inner].iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::PadSpatial { input, pad } => {
                let si = self.shape(*input).to_vec();
                let mut gx = vec![0.0; si.iter().product()];
                if si.len() == 2 {
                    let (c, l) = (si[0], si[1]);
                    let lp = l + 2 * pad;
                    for ch in 0..c {
                        gx[ch * l..(ch + 1) * l].copy_from_slice(&gd[ch * lp + pad..ch * lp + pad + l]);
                    }
                } else {
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                    for ch in 0..c {
                        for y in 0..h {
                            let src = (ch * hp + y + pad) * wp + pad;
                            let dst = (ch * h + y) * w;
                            gx[dst..dst + w].copy_from_slice(&gd[src..src + w]);
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(si, gx));
            }
            Op::Pool {
                input,
                size,
                axis,
                mode,
                argmax,
            } => {
                let si = self.shape(*input).to_vec();
                let mut gx = vec![0.0; si.iter().product()];
                match mode {
                    PoolMode::Max => {
                        for (gv, &idx) in gd.iter().zip(argmax) {
                            gx[idx] += gv;
                        }
                    }
                    PoolMode::Avg => {
                        let (outer, n, inner) = split_axis(&si, *axis);
                        let m = n / size;
                        let scale = 1.0 / *size as f64;
                        for o in 0..outer {
                            for j in 0..m {
                                for i in 0..inner {
                                    let gv = gd[(o * m + j) * inner + i] * scale;
                                    let base = (o * n + j * size) * inner + i;
                                    for s in 0..*size {
                                        gx[base + s * inner] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(si, gx));
            }
            Op::Activation { input, kind } => {
                let data = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * kind.derivative_from_output(y))
                    .collect();
                self.accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (outer, na, inner) = split_axis(&sa, *axis);
                let nb = sb[*axis];
                let mut ga = Vec::with_capacity(outer * na * inner);
                let mut gb = Vec::with_capacity(outer * nb * inner);
                let row = (na + nb) * inner;
                for o in 0..outer {
                    ga.extend_from_slice(&gd[o * row..o * row + na * inner]);
                    gb.extend_from_slice(&gd[o * row + na * inner..(o + 1) * row]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, ga));
                self.accumulate(grads, *b, Tensor::from_parts(sb, gb));
            }
            Op::Slice { input, axis, start } => {
                let si = self.shape(*input).to_vec();
                let (outer, n, inner) = split_axis(&si, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; si.iter().product()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    gx[to..to + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::from_parts(si, gx));
            }
            Op::Reshape(x) => {
                let gx = Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec());
                self.accumulate(grads, *x, gx);
            }
            Op::Stack(items) => {
                for (&v, &gv) in items.iter().zip(gd) {
                    let gx = Tensor::full(self.shape(v), gv);
                    self.accumulate(grads, v, gx);
                }
            }
            Op::LogSoftmax(x) => {
                let total: f64 = gd.iter().sum();
                let data = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv - y.exp() * total)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let inner: f64 = gd.iter().zip(y).map(|(a, b)| a * b).sum();
                let data = gd.iter().zip(y).map(|(gv, yv)| yv * (gv - inner)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Nll { input, target } => {
                let mut gx = Tensor::zeros(self.shape(*input));
                gx.data_mut()[*target] = -gd[0];
                self.accumulate(grads, *input, gx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Max-shifted softmax of a slice. Callers guarantee a non-empty input.
pub(crate) fn softmax_values(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
