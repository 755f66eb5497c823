//! Tape-based reverse-mode autodiff over the primitive ops the network
//! composes: 3×3 convolution, pooling, dense layers, activations,
//! broadcast elementwise arithmetic, channel concatenation and the
//! cross-entropy terminal.
//!
//! Every forward call appends one node (value + op record) to the tape;
//! `backward` walks the records in reverse and accumulates gradients,
//! summing over fan-out. Ops execute with fixed loop order so identical
//! inputs produce bit-identical outputs.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    /// Applied over the last axis; rows sum to 1.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Probability floor applied before the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
    },
    MaxPool2d {
        input: usize,
        /// Flat input index of the winning cell, per output element.
        argmax: Vec<usize>,
    },
    GlobalPool {
        input: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        input: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Dense {
        input: usize,
        weights: usize,
        bias: Option<usize>,
    },
    Unary {
        input: usize,
        kind: ActivationKind,
    },
    Softmax {
        input: usize,
    },
    Binary {
        lhs: usize,
        rhs: usize,
        kind: BinaryKind,
    },
    Concat {
        lhs: usize,
        rhs: usize,
    },
    Reshape {
        input: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    CrossEntropy {
        probs: usize,
        label: usize,
    },
}

pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if it received
    /// any flow.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<T>> {
        let g = self.grad(id)?;
        Some(
            Tensor::new(self.values[id.0].shape().to_vec(), g.to_vec())
                .expect("gradient shape mirrors value shape"),
        )
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        NodeId(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 3×3 convolution, stride 1, zero padding 1. Input H×W×Cin, kernels
    /// 3×3×Cin×Cout, output H×W×Cout.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId) -> Result<NodeId> {
        let x = &self.values[input.0];
        let k = &self.values[kernels.0];
        if x.rank() != 3 {
            return Err(Error::shape(format!(
                "conv2d input must be H×W×C, got {:?}",
                x.shape()
            )));
        }
        if k.rank() != 4 || k.shape()[0] != 3 || k.shape()[1] != 3 {
            return Err(Error::shape(format!(
                "conv2d kernels must be 3×3×Cin×Cout, got {:?}",
                k.shape()
            )));
        }
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if k.shape()[2] != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, kernels expect {}",
                k.shape()[2]
            )));
        }
        let cout = k.shape()[3];
        let mut out = vec![T::zero(); h * w * cout];
        conv2d_forward(x.data(), k.data(), h, w, cin, cout, &mut out);
        let value = Tensor::new(vec![h, w, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
            },
        ))
    }

    /// 2×2 max pooling, stride 2; odd trailing rows/columns pool a clipped
    /// window. Ties route to the first maximum in row-major order.
    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.values[input.0];
        if x.rank() != 3 {
            return Err(Error::shape(format!(
                "maxpool2d input must be H×W×C, got {:?}",
                x.shape()
            )));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h < 2 || w < 2 {
            return Err(Error::shape(format!(
                "maxpool2d needs H,W >= 2, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![T::zero(); oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        let data = x.data();
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        let y = oy * 2 + dy;
                        if y >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let x_ = ox * 2 + dx;
                            if x_ >= w {
                                continue;
                            }
                            let idx = (y * w + x_) * c + ch;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(
            value,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Per-channel max or mean over all spatial positions: H×W×C → 1×1×C.
    pub fn global_pool(&mut self, input: NodeId, mode: PoolMode) -> Result<NodeId> {
        let x = &self.values[input.0];
        if x.rank() != 3 {
            return Err(Error::shape(format!(
                "global_pool input must be H×W×C, got {:?}",
                x.shape()
            )));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let data = x.data();
        let mut out = vec![T::zero(); c];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                let inv = T::from_f64(1.0 / (h * w) as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for p in 0..h * w {
                        acc = acc + data[p * c + ch];
                    }
                    out[ch] = acc * inv;
                }
            }
            PoolMode::Max => {
                argmax = vec![0usize; c];
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for p in 0..h * w {
                        let idx = p * c + ch;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out[ch] = best;
                    argmax[ch] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![1, 1, c], out)?;
        Ok(self.push(
            value,
            Op::GlobalPool {
                input: input.0,
                mode,
                argmax,
            },
        ))
    }

    /// Per-position max or mean across channels: H×W×C → H×W×1.
    pub fn channel_pool(&mut self, input: NodeId, mode: PoolMode) -> Result<NodeId> {
        let x = &self.values[input.0];
        if x.rank() != 3 {
            return Err(Error::shape(format!(
                "channel_pool input must be H×W×C, got {:?}",
                x.shape()
            )));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let data = x.data();
        let mut out = vec![T::zero(); h * w];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                let inv = T::from_f64(1.0 / c as f64);
                for p in 0..h * w {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc = acc + data[p * c + ch];
                    }
                    out[p] = acc * inv;
                }
            }
            PoolMode::Max => {
                argmax = vec![0usize; h * w];
                for p in 0..h * w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ch in 0..c {
                        let idx = p * c + ch;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out[p] = best;
                    argmax[p] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![h, w, 1], out)?;
        Ok(self.push(
            value,
            Op::ChannelPool {
                input: input.0,
                mode,
                argmax,
            },
        ))
    }

    /// Fully connected layer: input length-m, weights m×n, optional bias
    /// length-n. `out_j = Σ_i in_i W_ij (+ b_j)`.
    pub fn dense(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let x = &self.values[input.0];
        let wt = &self.values[weights.0];
        if x.rank() != 1 {
            return Err(Error::shape(format!(
                "dense input must be a vector, got {:?}",
                x.shape()
            )));
        }
        if wt.rank() != 2 {
            return Err(Error::shape(format!(
                "dense weights must be m×n, got {:?}",
                wt.shape()
            )));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        if x.numel() != m {
            return Err(Error::shape(format!(
                "dense dimension mismatch: input {} vs weights {m}×{n}",
                x.numel()
            )));
        }
        if let Some(b) = bias {
            let bt = &self.values[b.0];
            if bt.rank() != 1 || bt.numel() != n {
                return Err(Error::shape(format!(
                    "dense bias must be length {n}, got {:?}",
                    bt.shape()
                )));
            }
        }
        let mut out = vec![T::zero(); n];
        if let Some(b) = bias {
            out.copy_from_slice(self.values[b.0].data());
        }
        let xd = x.data();
        let wd = wt.data();
        for i in 0..m {
            let xi = xd[i];
            let row = &wd[i * n..(i + 1) * n];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o = *o + xi * wv;
            }
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input: input.0,
                weights: weights.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    /// Elementwise activation; softmax applies over the last axis.
    pub fn activation(&mut self, input: NodeId, kind: ActivationKind) -> Result<NodeId> {
        let x = &self.values[input.0];
        match kind {
            ActivationKind::Softmax => {
                let last = *x.shape().last().expect("tensors are non-empty");
                let rows = x.numel() / last;
                let mut out = vec![T::zero(); x.numel()];
                let data = x.data();
                for r in 0..rows {
                    let row = &data[r * last..(r + 1) * last];
                    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for (o, &v) in out[r * last..(r + 1) * last].iter_mut().zip(row) {
                        let e = (v - max).exp();
                        *o = e;
                        sum = sum + e;
                    }
                    for o in &mut out[r * last..(r + 1) * last] {
                        *o = *o / sum;
                    }
                }
                let value = Tensor::new(x.shape().to_vec(), out)?;
                Ok(self.push(value, Op::Softmax { input: input.0 }))
            }
            _ => {
                let data = x.data();
                let out: Vec<T> = match kind {
                    ActivationKind::Relu => data.iter().map(|&v| v.max(T::zero())).collect(),
                    ActivationKind::Sigmoid => data
                        .iter()
                        .map(|&v| T::one() / (T::one() + (-v).exp()))
                        .collect(),
                    ActivationKind::Tanh => data.iter().map(|&v| v.tanh()).collect(),
                    ActivationKind::Softmax => unreachable!(),
                };
                let value = Tensor::new(x.shape().to_vec(), out)?;
                Ok(self.push(
                    value,
                    Op::Unary {
                        input: input.0,
                        kind,
                    },
                ))
            }
        }
    }

    /// Elementwise add/sub/mul. Operands must have equal rank; on each axis
    /// the extents must match or one must be 1 (that operand repeats).
    pub fn elementwise(&mut self, lhs: NodeId, rhs: NodeId, kind: BinaryKind) -> Result<NodeId> {
        let a = &self.values[lhs.0];
        let b = &self.values[rhs.0];
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); numel];
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            for i in 0..numel {
                out[i] = apply_binary(ad[i], bd[i], kind);
            }
        } else {
            let astr = broadcast_strides(a.shape(), &out_shape);
            let bstr = broadcast_strides(b.shape(), &out_shape);
            let mut i = 0;
            for_each_broadcast(&out_shape, &astr, &bstr, |ai, bi| {
                out[i] = apply_binary(ad[ai], bd[bi], kind);
                i += 1;
            });
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Binary {
                lhs: lhs.0,
                rhs: rhs.0,
                kind,
            },
        ))
    }

    /// Concatenate along the last axis (the channel axis for H×W×C maps).
    /// Leading extents must match; the left operand's channels come first.
    pub fn concat_channels(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let a = &self.values[lhs.0];
        let b = &self.values[rhs.0];
        if a.rank() != b.rank() {
            return Err(Error::shape(format!(
                "concat rank mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let nd = a.rank();
        if a.shape()[..nd - 1] != b.shape()[..nd - 1] {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (la, lb) = (a.shape()[nd - 1], b.shape()[nd - 1]);
        let rows = a.numel() / la;
        let mut out = vec![T::zero(); rows * (la + lb)];
        let (ad, bd) = (a.data(), b.data());
        for r in 0..rows {
            out[r * (la + lb)..r * (la + lb) + la].copy_from_slice(&ad[r * la..(r + 1) * la]);
            out[r * (la + lb) + la..(r + 1) * (la + lb)].copy_from_slice(&bd[r * lb..(r + 1) * lb]);
        }
        let mut shape = a.shape().to_vec();
        shape[nd - 1] = la + lb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                lhs: lhs.0,
                rhs: rhs.0,
            },
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let x = &self.values[input.0];
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                x.shape()
            )));
        }
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { input: input.0 }))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let x = &self.values[input.0];
        let out: Vec<T> = x.data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("shape preserved");
        self.push(
            value,
            Op::Scale {
                input: input.0,
                factor: f,
            },
        )
    }

    /// `-log(max(probs[label], 1e-12))` as a scalar node.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        let p = &self.values[probs.0];
        if p.rank() != 1 {
            return Err(Error::shape(format!(
                "cross_entropy expects a probability vector, got {:?}",
                p.shape()
            )));
        }
        if label >= p.numel() {
            return Err(Error::data(format!(
                "label {label} out of range for {} classes",
                p.numel()
            )));
        }
        let floor = T::from_f64(PROB_FLOOR);
        let loss = -(p.data()[label].max(floor)).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs: probs.0,
                label,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients sum over fan-out; leaves keep their accumulated slots.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        let n = self.values.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv2d { input, kernels } => {
                    let x = &self.values[*input];
                    let k = &self.values[*kernels];
                    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let cout = k.shape()[3];
                    let dx = grad_slot(&mut self.grads, *input, x.numel());
                    let mut dk_local = vec![T::zero(); k.numel()];
                    conv2d_backward(
                        x.data(),
                        k.data(),
                        &g,
                        h,
                        w,
                        cin,
                        cout,
                        dx,
                        &mut dk_local,
                    );
                    let dk = grad_slot(&mut self.grads, *kernels, k.numel());
                    for (d, s) in dk.iter_mut().zip(&dk_local) {
                        *d = *d + *s;
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let numel = self.values[*input].numel();
                    let dx = grad_slot(&mut self.grads, *input, numel);
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] = dx[src] + g[o];
                    }
                }
                Op::GlobalPool {
                    input,
                    mode,
                    argmax,
                } => {
                    let x = &self.values[*input];
                    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let numel = x.numel();
                    let dx = grad_slot(&mut self.grads, *input, numel);
                    match mode {
                        PoolMode::Avg => {
                            let inv = T::from_f64(1.0 / (h * w) as f64);
                            for ch in 0..c {
                                let gv = g[ch] * inv;
                                for p in 0..h * w {
                                    let idx = p * c + ch;
                                    dx[idx] = dx[idx] + gv;
                                }
                            }
                        }
                        PoolMode::Max => {
                            for ch in 0..c {
                                let idx = argmax[ch];
                                dx[idx] = dx[idx] + g[ch];
                            }
                        }
                    }
                }
                Op::ChannelPool {
                    input,
                    mode,
                    argmax,
                } => {
                    let x = &self.values[*input];
                    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let dx = grad_slot(&mut self.grads, *input, x.numel());
                    match mode {
                        PoolMode::Avg => {
                            let inv = T::from_f64(1.0 / c as f64);
                            for p in 0..h * w {
                                let gv = g[p] * inv;
                                for ch in 0..c {
                                    let idx = p * c + ch;
                                    dx[idx] = dx[idx] + gv;
                                }
                            }
                        }
                        PoolMode::Max => {
                            for p in 0..h * w {
                                let idx = argmax[p];
                                dx[idx] = dx[idx] + g[p];
                            }
                        }
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = &self.values[*input];
                    let wt = &self.values[*weights];
                    let (m, nn) = (wt.shape()[0], wt.shape()[1]);
                    let xd = x.data().to_vec();
                    let wd = wt.data();
                    {
                        let dx = grad_slot(&mut self.grads, *input, m);
                        for i in 0..m {
                            let row = &wd[i * nn..(i + 1) * nn];
                            let mut acc = T::zero();
                            for (gv, wv) in g.iter().zip(row) {
                                acc = acc + *gv * *wv;
                            }
                            dx[i] = dx[i] + acc;
                        }
                    }
                    {
                        let dw = grad_slot(&mut self.grads, *weights, m * nn);
                        for i in 0..m {
                            let xi = xd[i];
                            let drow = &mut dw[i * nn..(i + 1) * nn];
                            for (d, gv) in drow.iter_mut().zip(&g) {
                                *d = *d + xi * *gv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let db = grad_slot(&mut self.grads, *b, nn);
                        for (d, gv) in db.iter_mut().zip(&g) {
                            *d = *d + *gv;
                        }
                    }
                }
                Op::Unary { input, kind } => {
                    let numel = self.values[*input].numel();
                    let (xin, out) = (&self.values[*input], &self.values[i]);
                    let contrib: Vec<T> = match kind {
                        ActivationKind::Relu => xin
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                            .collect(),
                        ActivationKind::Sigmoid => out
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&s, &gv)| gv * s * (T::one() - s))
                            .collect(),
                        ActivationKind::Tanh => out
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&t, &gv)| gv * (T::one() - t * t))
                            .collect(),
                        ActivationKind::Softmax => unreachable!(),
                    };
                    let dx = grad_slot(&mut self.grads, *input, numel);
                    for (d, s) in dx.iter_mut().zip(&contrib) {
                        *d = *d + *s;
                    }
                }
                Op::Softmax { input } => {
                    let out = &self.values[i];
                    let last = *out.shape().last().expect("non-empty");
                    let rows = out.numel() / last;
                    let od = out.data();
                    let mut contrib = vec![T::zero(); out.numel()];
                    for r in 0..rows {
                        let s = &od[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let mut dot = T::zero();
                        for (sv, gv) in s.iter().zip(gr) {
                            dot = dot + *sv * *gv;
                        }
                        for (c, (&sv, &gv)) in contrib[r * last..(r + 1) * last]
                            .iter_mut()
                            .zip(s.iter().zip(gr))
                        {
                            *c = sv * (gv - dot);
                        }
                    }
                    let numel = self.values[*input].numel();
                    let dx = grad_slot(&mut self.grads, *input, numel);
                    for (d, s) in dx.iter_mut().zip(&contrib) {
                        *d = *d + *s;
                    }
                }
                Op::Binary { lhs, rhs, kind } => {
                    let (a, b) = (&self.values[*lhs], &self.values[*rhs]);
                    let out_shape = self.values[i].shape().to_vec();
                    let kind = *kind;
                    let mut da = vec![T::zero(); a.numel()];
                    let mut db = vec![T::zero(); b.numel()];
                    let (ad, bd) = (a.data(), b.data());
                    if a.shape() == b.shape() {
                        for idx in 0..g.len() {
                            binary_backward(kind, ad[idx], bd[idx], g[idx], &mut da[idx], &mut db[idx]);
                        }
                    } else {
                        let astr = broadcast_strides(a.shape(), &out_shape);
                        let bstr = broadcast_strides(b.shape(), &out_shape);
                        let mut idx = 0;
                        for_each_broadcast(&out_shape, &astr, &bstr, |ai, bi| {
                            binary_backward(kind, ad[ai], bd[bi], g[idx], &mut da[ai], &mut db[bi]);
                            idx += 1;
                        });
                    }
                    let (an, bn) = (a.numel(), b.numel());
                    let dsa = grad_slot(&mut self.grads, *lhs, an);
                    for (d, s) in dsa.iter_mut().zip(&da) {
                        *d = *d + *s;
                    }
                    let dsb = grad_slot(&mut self.grads, *rhs, bn);
                    for (d, s) in dsb.iter_mut().zip(&db) {
                        *d = *d + *s;
                    }
                }
                Op::Concat { lhs, rhs } => {
                    let (a, b) = (&self.values[*lhs], &self.values[*rhs]);
                    let nd = a.rank();
                    let (la, lb) = (a.shape()[nd - 1], b.shape()[nd - 1]);
                    let rows = a.numel() / la;
                    let (an, bn) = (a.numel(), b.numel());
                    {
                        let da = grad_slot(&mut self.grads, *lhs, an);
                        for r in 0..rows {
                            for j in 0..la {
                                da[r * la + j] = da[r * la + j] + g[r * (la + lb) + j];
                            }
                        }
                    }
                    {
                        let db = grad_slot(&mut self.grads, *rhs, bn);
                        for r in 0..rows {
                            for j in 0..lb {
                                db[r * lb + j] = db[r * lb + j] + g[r * (la + lb) + la + j];
                            }
                        }
                    }
                }
                Op::Reshape { input } => {
                    let numel = self.values[*input].numel();
                    let dx = grad_slot(&mut self.grads, *input, numel);
                    for (d, s) in dx.iter_mut().zip(&g) {
                        *d = *d + *s;
                    }
                }
                Op::Scale { input, factor } => {
                    let numel = self.values[*input].numel();
                    let f = *factor;
                    let dx = grad_slot(&mut self.grads, *input, numel);
                    for (d, s) in dx.iter_mut().zip(&g) {
                        *d = *d + *s * f;
                    }
                }
                Op::CrossEntropy { probs, label } => {
                    let p = self.values[*probs].data()[*label];
                    let floor = T::from_f64(PROB_FLOOR);
                    let numel = self.values[*probs].numel();
                    let label = *label;
                    let dx = grad_slot(&mut self.grads, *probs, numel);
                    if p > floor {
                        dx[label] = dx[label] - g[0] / p;
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn apply_binary<T: Real>(a: T, b: T, kind: BinaryKind) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
    }
}

fn binary_backward<T: Real>(kind: BinaryKind, a: T, b: T, g: T, da: &mut T, db: &mut T) {
    match kind {
        BinaryKind::Add => {
            *da = *da + g;
            *db = *db + g;
        }
        BinaryKind::Sub => {
            *da = *da + g;
            *db = *db - g;
        }
        BinaryKind::Mul => {
            *da = *da + g * b;
            *db = *db + g * a;
        }
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, numel: usize) -> &mut [T] {
    grads[idx].get_or_insert_with(|| vec![T::zero(); numel])
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "elementwise rank mismatch: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(Error::shape(format!(
                    "incompatible shapes for broadcast: {a:?} vs {b:?}"
                )))
            }
        })
        .collect()
}

/// Row-major strides; 0 on axes the operand repeats over.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out_shape[d] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[d];
    }
    strides
}

/// Visit every output position with the flat offsets into both operands,
/// in row-major order (odometer walk, no per-element div/mod).
fn for_each_broadcast(
    out_shape: &[usize],
    astr: &[usize],
    bstr: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let ndim = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; ndim];
    let (mut a, mut b) = (0usize, 0usize);
    for _ in 0..numel {
        f(a, b);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            a += astr[d];
            b += bstr[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            a -= astr[d] * out_shape[d];
            b -= bstr[d] * out_shape[d];
        }
    }
}

fn conv2d_forward<T: Real>(
    input: &[T],
    kernels: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    out: &mut [T],
) {
    for y in 0..h {
        for ky in 0..3usize {
            let yy = y as isize + ky as isize - 1;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            let yy = yy as usize;
            for x in 0..w {
                let orow = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xx = xx as usize;
                    let irow = &input[(yy * w + xx) * cin..(yy * w + xx + 1) * cin];
                    let kbase = ((ky * 3 + kx) * cin) * cout;
                    for (ci, &iv) in irow.iter().enumerate() {
                        let krow = &kernels[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o = *o + iv * kv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    input: &[T],
    kernels: &[T],
    g: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    dinput: &mut [T],
    dkernels: &mut [T],
) {
    for y in 0..h {
        for ky in 0..3usize {
            let yy = y as isize + ky as isize - 1;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            let yy = yy as usize;
            for x in 0..w {
                let grow = &g[(y * w + x) * cout..(y * w + x + 1) * cout];
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xx = xx as usize;
                    let ibase = (yy * w + xx) * cin;
                    let kbase = ((ky * 3 + kx) * cin) * cout;
                    for ci in 0..cin {
                        let krow = &kernels[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for (gv, kv) in grow.iter().zip(krow) {
                            acc = acc + *gv * *kv;
                        }
                        dinput[ibase + ci] = dinput[ibase + ci] + acc;
                        let iv = input[ibase + ci];
                        let dkrow = &mut dkernels[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (d, gv) in dkrow.iter_mut().zip(grow) {
                            *d = *d + iv * *gv;
                        }
                    }
                }
            }
        }
    }
}
