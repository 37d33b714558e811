//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations executed through a [`Tape`] record their inputs and a backward
//! rule. [`Tape::backward`] walks the tape in reverse, accumulating gradients
//! into every node that requires them. Tape order is topological by
//! construction, so the reverse walk visits consumers before producers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

enum Op {
    Leaf,
    /// Elementwise a + b, same shape.
    Add(usize, usize),
    /// Elementwise a * b, same shape.
    Mul(usize, usize),
    /// Tensor broadcast-multiplied by a scalar (1-element) variable.
    MulScalar { tensor: usize, scalar: usize },
    /// out = mul * x + add; only the slope matters to the backward rule.
    AffineConst { x: usize, mul: f32 },
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Relu(usize),
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        mean: Tensor,
        var: Tensor,
        /// Batch statistics (training mode): gradients flow through mean/var.
        batch_stats: bool,
    },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    SmoothL1 { pred: usize, target: Tensor, weights: Tensor },
    ReduceSum(usize),
    /// Hard threshold at 0 (r >= 0 -> 1), sigmoid-derivative backward.
    BinarizeSte(usize),
    /// Rows [(n*H+h)*W+w] of channels c0..c1 from an [N,C,H,W] input.
    ChannelRows { x: usize, c0: usize, c1: usize },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        // A new forward op after backward starts a fresh pass.
        if self.backward_done {
            self.backward_done = false;
            for n in &mut self.nodes {
                n.grad = Tensor::zeros(n.value.shape().to_vec());
            }
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension {
                context: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension {
                context: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Mul(a.0, b.0)))
    }

    pub fn mul_scalar(&mut self, tensor: Var, scalar: Var) -> Result<Var> {
        let vs = self.value(scalar);
        if vs.len() != 1 {
            return Err(Error::Argument(format!(
                "mul_scalar: scalar operand has shape {:?}",
                vs.shape()
            )));
        }
        let s = vs.item();
        let mut out = self.value(tensor).clone();
        for o in out.data_mut() {
            *o *= s;
        }
        let rg = self.needs(tensor) || self.needs(scalar);
        Ok(self.push(
            out,
            rg,
            Op::MulScalar {
                tensor: tensor.0,
                scalar: scalar.0,
            },
        ))
    }

    pub fn affine_const(&mut self, x: Var, mul: f32, add: f32) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = mul * *o + add;
        }
        let rg = self.needs(x);
        self.push(out, rg, Op::AffineConst { x: x.0, mul })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.affine_const(x, factor, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                context: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        {
            let (da, db, dout) = (va.data(), vb.data(), out.data_mut());
            for i in 0..m {
                for p in 0..k {
                    let aip = da[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        dout[i * n + j] += aip * db[p * n + j];
                    }
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Dimension {
                context: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad || stride == 0 {
            return Err(Error::Dimension {
                context: "conv2d kernel exceeds padded input",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![n, k, ho, wo]);
        {
            let (dx, dw, dout) = (vx.data(), vw.data(), out.data_mut());
            for bi in 0..n {
                for ko in 0..k {
                    let obase = (bi * k + ko) * ho * wo;
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * h * wd;
                        let wbase = (ko * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, ho);
                            for kx in 0..kw {
                                let wv = dw[wbase + ky * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wd, wo);
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow = xbase + iy * wd;
                                    let orow = obase + oy * wo;
                                    for ox in ox_lo..ox_hi {
                                        dout[orow + ox] +=
                                            wv * dx[xrow + ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        let rg = self.needs(x);
        self.push(out, rg, Op::Relu(x.0))
    }

    /// Batch normalization over axis 1 of an [N,C,...] input.
    ///
    /// In training mode normalizes with batch statistics and returns them so
    /// the caller can fold them into running stats. In eval mode normalizes
    /// with the supplied running stats.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        training: bool,
    ) -> Result<(Var, Tensor, Tensor)> {
        let vx = self.value(x);
        let sx = vx.shape().to_vec();
        if sx.len() < 2 {
            return Err(Error::Argument(format!(
                "batchnorm: input rank {} < 2",
                sx.len()
            )));
        }
        let channels = sx[1];
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).len() != channels {
                return Err(Error::Dimension {
                    context: if name == "scale" {
                        "batchnorm scale"
                    } else {
                        "batchnorm shift"
                    },
                    lhs: sx.clone(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let per_channel: usize = vx.len() / channels;
        let (mean, var) = if training {
            let mut mean = vec![0.0f64; channels];
            let mut var = vec![0.0f64; channels];
            for_each_channel(vx, |c, v| mean[c] += v as f64);
            for m in &mut mean {
                *m /= per_channel as f64;
            }
            for_each_channel(vx, |c, v| {
                let d = v as f64 - mean[c];
                var[c] += d * d;
            });
            for v in &mut var {
                *v /= per_channel as f64;
            }
            (
                Tensor::new(vec![channels], mean.iter().map(|&m| m as f32).collect())?,
                Tensor::new(vec![channels], var.iter().map(|&v| v as f32).collect())?,
            )
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let g = self.value(scale).data().to_vec();
        let b = self.value(shift).data().to_vec();
        let vx = self.value(x);
        let mut out = vx.clone();
        map_channels(&mut out, |c, v| {
            let inv = 1.0 / (var.data()[c] + BN_EPS).sqrt();
            g[c] * (v - mean.data()[c]) * inv + b[c]
        });
        let rg = self.needs(x) || self.needs(scale) || self.needs(shift);
        let v = self.push(
            out,
            rg,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                mean: mean.clone(),
                var: var.clone(),
                batch_stats: training,
            },
        );
        Ok((v, mean, var))
    }

    /// Mean softmax cross-entropy over rows of an [n, k] logit matrix.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Argument(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                s,
                labels.len()
            )));
        }
        if s[0] == 0 {
            return Err(Error::Argument("softmax_cross_entropy: no rows".into()));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let mut total = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let r = &vl.data()[row * k..(row + 1) * k];
            let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = r.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln()
                + max as f64;
            total += lse - r[label] as f64;
        }
        let out = Tensor::scalar((total / n as f64) as f32);
        let rg = self.needs(logits);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Weighted smooth-L1: sum_i w_i * huber(pred_i - target_i).
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
        let vp = self.value(pred);
        if !vp.same_shape(target) || !vp.same_shape(weights) {
            return Err(Error::Dimension {
                context: "smooth_l1",
                lhs: vp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let mut total = 0.0f64;
        for ((&p, &t), &w) in vp.data().iter().zip(target.data()).zip(weights.data()) {
            let d = (p - t) as f64;
            let h = if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
            total += w as f64 * h;
        }
        let out = Tensor::scalar(total as f32);
        let rg = self.needs(pred);
        Ok(self.push(
            out,
            rg,
            Op::SmoothL1 {
                pred: pred.0,
                target: target.clone(),
                weights: weights.clone(),
            },
        ))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s as f32), rg, Op::ReduceSum(x.0))
    }

    /// Hard threshold to {0,1}: r >= 0 maps to 1. Backward multiplies the
    /// incoming gradient by sigma(r) * (1 - sigma(r)).
    pub fn binarize_ste(&mut self, r: Var) -> Var {
        let mut out = self.value(r).clone();
        for o in out.data_mut() {
            *o = if *o >= 0.0 { 1.0 } else { 0.0 };
        }
        let rg = self.needs(r);
        self.push(out, rg, Op::BinarizeSte(r.0))
    }

    /// Flattens channels c0..c1 of an [N,C,H,W] tensor into rows, one row per
    /// spatial cell, in (n, h, w) order.
    pub fn channel_rows(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 || c1 > s[1] || c0 >= c1 {
            return Err(Error::Argument(format!(
                "channel_rows: channels {}..{} on shape {:?}",
                c0, c1, s
            )));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let cols = c1 - c0;
        let mut out = Tensor::zeros(vec![n * h * w, cols]);
        {
            let d = out.data_mut();
            for bi in 0..n {
                for hy in 0..h {
                    for wx in 0..w {
                        let row = (bi * h + hy) * w + wx;
                        for (j, c) in (c0..c1).enumerate() {
                            d[row * cols + j] = vx.at4(bi, c, hy, wx);
                        }
                    }
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::ChannelRows { x: x.0, c0, c1 }))
    }

    /// Reverse pass from a scalar output. A second call without any new
    /// forward op is rejected.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Argument(
                "backward already ran on this tape; run a new forward pass first".into(),
            ));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.backward_done = true;
        self.nodes[output.0].grad.data_mut()[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        // Split borrows: read this node's grad/value, write into inputs.
        let grad = self.nodes[i].grad.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.data());
                self.accumulate(b, grad.data());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                let gb: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::MulScalar { tensor, scalar } => {
                let (t, s) = (*tensor, *scalar);
                let sv = self.nodes[s].value.item();
                let gt: Vec<f32> = grad.data().iter().map(|g| g * sv).collect();
                let gs: f32 = grad
                    .data()
                    .iter()
                    .zip(self.nodes[t].value.data())
                    .map(|(g, v)| g * v)
                    .sum();
                self.accumulate(t, &gt);
                self.accumulate(s, &[gs]);
            }
            Op::AffineConst { x, mul } => {
                let (x, mul) = (*x, *mul);
                let gx: Vec<f32> = grad.data().iter().map(|g| g * mul).collect();
                self.accumulate(x, &gx);
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a].requires_grad {
                    // dA = dC . B^T
                    let mut ga = vec![0.0f32; m * k];
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grad.data()[i2 * n + j] * vb.data()[p * n + j];
                            }
                            ga[i2 * k + p] = acc;
                        }
                    }
                    self.accumulate(a, &ga);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T . dC
                    let mut gb = vec![0.0f32; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += va.data()[i2 * k + p] * grad.data()[i2 * n + j];
                            }
                            gb[p * n + j] = acc;
                        }
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let vx = self.nodes[x].value.clone();
                let vw = self.nodes[w].value.clone();
                let (n, c, h, wd) = {
                    let s = vx.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (k, kh, kw) = {
                    let s = vw.shape();
                    (s[0], s[2], s[3])
                };
                let (ho, wo) = {
                    let s = grad.shape();
                    (s[2], s[3])
                };
                // Skip the half of the backward work whose target is frozen
                // (e.g. input images never need a gradient).
                let need_x = self.nodes[x].requires_grad;
                let need_w = self.nodes[w].requires_grad;
                let dg = grad.data();
                if need_x {
                    let mut gx = Tensor::zeros(vx.shape().to_vec());
                    let dgx = gx.data_mut();
                    let dw = vw.data();
                    for bi in 0..n {
                        for ko in 0..k {
                            let obase = (bi * k + ko) * ho * wo;
                            for ci in 0..c {
                                let xbase = (bi * c + ci) * h * wd;
                                let wbase = (ko * c + ci) * kh * kw;
                                for ky in 0..kh {
                                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, ho);
                                    for kx in 0..kw {
                                        let wv = dw[wbase + ky * kw + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        let (ox_lo, ox_hi) =
                                            valid_range(kx, pad, stride, wd, wo);
                                        for oy in oy_lo..oy_hi {
                                            let iy = oy * stride + ky - pad;
                                            let xrow = xbase + iy * wd;
                                            let orow = obase + oy * wo;
                                            for ox in ox_lo..ox_hi {
                                                dgx[xrow + ox * stride + kx - pad] +=
                                                    wv * dg[orow + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, gx.data());
                }
                if need_w {
                    let mut gw = Tensor::zeros(vw.shape().to_vec());
                    let dgw = gw.data_mut();
                    let dx = vx.data();
                    for bi in 0..n {
                        for ko in 0..k {
                            let obase = (bi * k + ko) * ho * wo;
                            for ci in 0..c {
                                let xbase = (bi * c + ci) * h * wd;
                                let wbase = (ko * c + ci) * kh * kw;
                                for ky in 0..kh {
                                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, ho);
                                    for kx in 0..kw {
                                        let (ox_lo, ox_hi) =
                                            valid_range(kx, pad, stride, wd, wo);
                                        let mut acc = 0.0f32;
                                        for oy in oy_lo..oy_hi {
                                            let iy = oy * stride + ky - pad;
                                            let xrow = xbase + iy * wd;
                                            let orow = obase + oy * wo;
                                            for ox in ox_lo..ox_hi {
                                                acc += dg[orow + ox]
                                                    * dx[xrow + ox * stride + kx - pad];
                                            }
                                        }
                                        dgw[wbase + ky * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(w, gw.data());
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let gx: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(self.nodes[x].value.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                var,
                batch_stats,
            } => {
                let (x, scale, shift, batch_stats) = (*x, *scale, *shift, *batch_stats);
                let mean = mean.clone();
                let var = var.clone();
                let vx = self.nodes[x].value.clone();
                let gv = self.nodes[scale].value.clone();
                let channels = vx.shape()[1];
                let per_channel = vx.len() / channels;
                let inv_std: Vec<f32> =
                    var.data().iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                // xhat and per-channel reductions of the incoming gradient.
                let inner: usize = vx.shape()[2..].iter().product();
                let mut sum_dy = vec![0.0f64; channels];
                let mut sum_dy_xhat = vec![0.0f64; channels];
                let mut xhat = vec![0.0f32; vx.len()];
                for (i, (vblock, gblock)) in vx
                    .data()
                    .chunks_exact(inner)
                    .zip(grad.data().chunks_exact(inner))
                    .enumerate()
                {
                    let c = i % channels;
                    let base = i * inner;
                    for (j, (&v, &g)) in vblock.iter().zip(gblock).enumerate() {
                        let xh = (v - mean.data()[c]) * inv_std[c];
                        xhat[base + j] = xh;
                        sum_dy[c] += g as f64;
                        sum_dy_xhat[c] += (g * xh) as f64;
                    }
                }
                let gscale: Vec<f32> = sum_dy_xhat.iter().map(|&v| v as f32).collect();
                let gshift: Vec<f32> = sum_dy.iter().map(|&v| v as f32).collect();
                let mut gx = vec![0.0f32; vx.len()];
                for (i, (gxblock, gblock)) in gx
                    .chunks_exact_mut(inner)
                    .zip(grad.data().chunks_exact(inner))
                    .enumerate()
                {
                    let c = i % channels;
                    let gamma = gv.data()[c];
                    let base = i * inner;
                    if batch_stats {
                        let m = per_channel as f32;
                        let coeff = gamma * inv_std[c] / m;
                        let (sd, sdx) = (sum_dy[c] as f32, sum_dy_xhat[c] as f32);
                        for (j, (o, &g)) in gxblock.iter_mut().zip(gblock).enumerate() {
                            *o = coeff * (m * g - sd - xhat[base + j] * sdx);
                        }
                    } else {
                        let coeff = gamma * inv_std[c];
                        for (o, &g) in gxblock.iter_mut().zip(gblock) {
                            *o = coeff * g;
                        }
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(scale, &gscale);
                self.accumulate(shift, &gshift);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let vl = self.nodes[logits].value.clone();
                let (n, k) = (vl.shape()[0], vl.shape()[1]);
                let g = grad.item() / n as f32;
                let mut gl = vec![0.0f32; n * k];
                for (row, &label) in labels.iter().enumerate() {
                    let r = &vl.data()[row * k..(row + 1) * k];
                    let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f32 = r.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (r[j] - max).exp() / denom;
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl[row * k + j] = g * (p - onehot);
                    }
                }
                self.accumulate(logits, &gl);
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
            } => {
                let pred = *pred;
                let target = target.clone();
                let weights = weights.clone();
                let g = grad.item();
                let gp: Vec<f32> = self.nodes[pred]
                    .value
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights.data())
                    .map(|((&p, &t), &w)| {
                        let d = p - t;
                        g * w * d.clamp(-1.0, 1.0)
                    })
                    .collect();
                self.accumulate(pred, &gp);
            }
            Op::ReduceSum(x) => {
                let x = *x;
                let g = grad.item();
                let gx = vec![g; self.nodes[x].value.len()];
                self.accumulate(x, &gx);
            }
            Op::BinarizeSte(x) => {
                let x = *x;
                let gx: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(self.nodes[x].value.data())
                    .map(|(g, &r)| {
                        let s = sigmoid(r);
                        g * s * (1.0 - s)
                    })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::ChannelRows { x, c0, c1 } => {
                let (x, c0, c1) = (*x, *c0, *c1);
                let sx = self.nodes[x].value.shape().to_vec();
                let (n, h, w) = (sx[0], sx[2], sx[3]);
                let cols = c1 - c0;
                let mut gx = Tensor::zeros(sx);
                for bi in 0..n {
                    for hy in 0..h {
                        for wx in 0..w {
                            let row = (bi * h + hy) * w + wx;
                            for (j, c) in (c0..c1).enumerate() {
                                *gx.at4_mut(bi, c, hy, wx) = grad.data()[row * cols + j];
                            }
                        }
                    }
                }
                self.accumulate(x, gx.data());
            }
        }
    }

    fn accumulate(&mut self, node: usize, grad: &[f32]) {
        for (g, d) in self.nodes[node].grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }
}

/// Valid output range for one kernel offset: all `o` with
/// 0 <= o * stride + kofs - pad < in_size, clamped to [0, out_size).
#[inline]
fn valid_range(kofs: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if pad > kofs {
        (pad - kofs).div_ceil(stride)
    } else {
        0
    };
    if in_size + pad <= kofs {
        return (0, 0);
    }
    let hi = ((in_size - 1 + pad - kofs) / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

/// Iterate channel blocks of an [N, C, ...] tensor: `f(channel, block)`.
fn for_channel_blocks(shape: &[usize], data: &[f32], mut f: impl FnMut(usize, &[f32])) {
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    for (i, block) in data.chunks_exact(inner).enumerate() {
        f(i % channels, block);
    }
}

fn for_each_channel(t: &Tensor, mut f: impl FnMut(usize, f32)) {
    for_channel_blocks(t.shape(), t.data(), |c, block| {
        for &v in block {
            f(c, v);
        }
    });
}

fn map_channels(t: &mut Tensor, f: impl Fn(usize, f32) -> f32) {
    let channels = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    for (i, block) in t.data_mut().chunks_exact_mut(inner).enumerate() {
        let c = i % channels;
        for v in block {
            *v = f(c, *v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_inner_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.constant(t(vec![2, 1], vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{}", err);
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(vec![1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_all_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2], vec![-2.0, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn batchnorm_identity_on_normalized_input() {
        // Per-channel mean 0, variance 1 already.
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 1], vec![-1.0, 1.0]));
        let scale = tape.constant(Tensor::full(vec![1], 1.0));
        let shift = tape.constant(Tensor::zeros(vec![1]));
        let rm = Tensor::zeros(vec![1]);
        let rv = Tensor::full(vec![1], 1.0);
        let (y, mean, var) = tape.batchnorm(x, scale, shift, &rm, &rv, true).unwrap();
        assert!((tape.value(y).data()[0] - -1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-4);
        assert!(mean.data()[0].abs() < 1e-7);
        assert!((var.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(vec![1, 2], vec![0.0, 0.0]));
        let l = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn softmax_cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(tape.softmax_cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn binarize_threshold_and_tie() {
        let mut tape = Tape::new();
        let r = tape.constant(t(vec![3], vec![0.3, -0.3, 0.0]));
        let m = tape.binarize_ste(r);
        assert_eq!(tape.value(m).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn binarize_backward_factors() {
        for (r, expected) in [(0.0f32, 0.25f32), (4.0, 0.017662706)] {
            let mut tape = Tape::new();
            let rv = tape.leaf(Tensor::scalar(r), true);
            let m = tape.binarize_ste(rv);
            let s = tape.reduce_sum(m);
            tape.backward(s).unwrap();
            assert!(
                (tape.grad(rv).item() - expected).abs() < 1e-6,
                "r={} got {}",
                r,
                tape.grad(rv).item()
            );
        }
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.reduce_sum(x);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
        // A new forward pass makes backward legal again.
        let y2 = tape.reduce_sum(x);
        tape.backward(y2).unwrap();
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn deterministic_gradients() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t(vec![2, 2], vec![0.3, -1.2, 0.7, 2.1]), true);
            let b = tape.constant(t(vec![2, 2], vec![1.1, 0.4, -0.6, 0.9]));
            let c = tape.matmul(a, b).unwrap();
            let r = tape.relu(c);
            let s = tape.reduce_sum(r);
            tape.backward(s).unwrap();
            tape.grad(a).data().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
