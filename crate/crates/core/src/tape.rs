//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Operations execute eagerly and record themselves as nodes; node order is
//! the topological order, so [`Tape::backward`] is a single reverse sweep
//! that visits each node exactly once. A [`Var`] is an index into its tape.
//!
//! One tape is confined to one thread; forward helpers in [`crate::tensor`]
//! are re-entrant, so disjoint tapes may run concurrently.

use crate::error::{Error, Result};
use crate::runtime;
use crate::tensor::{blur_pass, blur_pass_adjoint, reflect_index, Tensor};
use rayon::prelude::*;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Padding behavior for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    Min,
}

#[derive(Debug)]
enum OpKind {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * broadcast(b)`: same rank, every dim of `b` equals `a`'s or is 1.
    MulBroadcast(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Single-axis reduction, keepdim semantics. Max/Min store the winning
    /// flat input index per output element (first extremum on ties).
    Reduce {
        input: Var,
        axis: usize,
        op: ReduceOp,
        arg: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    },
    /// Per-output-channel bias over `[N,F,H,W]`.
    BiasAdd(Var, Var),
    /// Separable Gaussian blur, reflect padding, applied per plane.
    GaussianBlur {
        input: Var,
        kernel: Vec<f64>,
    },
    MaxPool {
        input: Var,
        arg: Vec<usize>,
    },
    /// Stride-1 spatial min over an odd window whose neighborhood is clipped
    /// at the borders (no padding values are injected).
    MinPoolWindow {
        input: Var,
        arg: Vec<usize>,
    },
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    NarrowChannels {
        input: Var,
        start: usize,
        len: usize,
    },
}

impl OpKind {
    fn parents(&self) -> Vec<Var> {
        match self {
            OpKind::Leaf => vec![],
            OpKind::Add(a, b) | OpKind::Sub(a, b) | OpKind::Mul(a, b) => vec![*a, *b],
            OpKind::MulBroadcast(a, b) | OpKind::BiasAdd(a, b) => vec![*a, *b],
            OpKind::AddScalar(a)
            | OpKind::Scale(a, _)
            | OpKind::Relu(a)
            | OpKind::Sigmoid(a)
            | OpKind::Exp(a)
            | OpKind::Ln(a)
            | OpKind::Abs(a)
            | OpKind::SumAll(a)
            | OpKind::MeanAll(a)
            | OpKind::Upsample2x(a) => vec![*a],
            OpKind::Reduce { input, .. }
            | OpKind::GaussianBlur { input, .. }
            | OpKind::MaxPool { input, .. }
            | OpKind::MinPoolWindow { input, .. }
            | OpKind::NarrowChannels { input, .. } => vec![*input],
            OpKind::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            OpKind::ConcatChannels(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: OpKind,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording tape. Create one per forward/backward episode.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. This is a tape boundary: non-finite values
    /// are rejected here.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} rejected at tape boundary"
            )));
        }
        Ok(self.push(value, OpKind::Leaf, requires_grad))
    }

    /// Record a constant (no gradient will be tracked through it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Gradient of the last backward() with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: OpKind, leaf_requires: bool) -> Var {
        let requires_grad = leaf_requires
            || op
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "{name}: shape {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, OpKind::Add(a, b), false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, OpKind::Sub(a, b), false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, OpKind::Mul(a, b), false))
    }

    /// `a * b` with `b` broadcast onto `a`'s shape (same rank, dims equal
    /// or 1). Serves attention gates: `[N,C,1,1]` and `[N,1,H,W]` over
    /// `[N,C,H,W]`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != bd.len() || ad.iter().zip(&bd).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::Shape(format!(
                "mul_broadcast: {bd:?} does not broadcast onto {ad:?}"
            )));
        }
        let out = broadcast_apply(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, OpKind::MulBroadcast(a, b), false))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        Ok(self.push(v, OpKind::AddScalar(a), false))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        Ok(self.push(v, OpKind::Scale(a, s), false))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(v, OpKind::Relu(a), false))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        Ok(self.push(v, OpKind::Sigmoid(a), false))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push(v, OpKind::Exp(a), false))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("ln requires strictly positive input".into()));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, OpKind::Ln(a), false))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        Ok(self.push(v, OpKind::Abs(a), false))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), OpKind::SumAll(a), false))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        Ok(self.push(Tensor::scalar(m), OpKind::MeanAll(a), false))
    }

    /// Single-axis reduction with keepdim semantics.
    pub fn reduce(&mut self, a: Var, axis: usize, op: ReduceOp) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() {
            return Err(Error::Shape(format!(
                "reduce axis {axis} out of range for {dims:?}"
            )));
        }
        let (value, arg) = reduce_forward(self.value(a), axis, op);
        Ok(self.push(
            value,
            OpKind::Reduce {
                input: a,
                axis,
                op,
                arg,
            },
            false,
        ))
    }

    /// Global average pool over the two trailing spatial axes of `[N,C,H,W]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let h = self.reduce(a, 2, ReduceOp::Mean)?;
        self.reduce(h, 3, ReduceOp::Mean)
    }

    /// 2-D cross-correlation of `[N,C,H,W]` with `[F,C,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let kd = self.dims(kernel).to_vec();
        if xd.len() != 4 || kd.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d wants [N,C,H,W] and [F,C,kH,kW], got {xd:?} and {kd:?}"
            )));
        }
        if kd[2] % 2 == 0 || kd[3] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel must be odd, got {}x{}",
                kd[2], kd[3]
            )));
        }
        if stride < 1 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if xd[1] != kd[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input C={} kernel C={}",
                xd[1], kd[1]
            )));
        }
        let oh = (xd[2] + 2 * padding).checked_sub(kd[2]).map(|v| v / stride + 1);
        let ow = (xd[3] + 2 * padding).checked_sub(kd[3]).map(|v| v / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d output would be empty for input {}x{} kernel {}x{} pad {}",
                    xd[2], xd[3], kd[2], kd[3], padding
                )))
            }
        };
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            stride,
            padding,
            pad_mode,
            oh,
            ow,
        );
        Ok(self.push(
            out,
            OpKind::Conv2d {
                input,
                kernel,
                stride,
                padding,
                pad_mode,
            },
            false,
        ))
    }

    /// Add a `[F]` bias over `[N,F,H,W]`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let bd = self.dims(bias).to_vec();
        if xd.len() != 4 || bd.len() != 1 || bd[0] != xd[1] {
            return Err(Error::Shape(format!(
                "bias_add: input {xd:?} bias {bd:?}"
            )));
        }
        let (n, f, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let b = self.value(bias).data().to_vec();
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * h * w;
                for i in 0..h * w {
                    out[base + i] = x[base + i] + b[fi];
                }
            }
        }
        let t = Tensor::from_parts(xd, out);
        Ok(self.push(t, OpKind::BiasAdd(input, bias), false))
    }

    /// Separable Gaussian blur (reflect padding) as a differentiable op.
    pub fn gaussian_blur(&mut self, input: Var, sigma: f64) -> Result<Var> {
        let kernel = crate::tensor::gaussian_kernel_1d(sigma)?.into_data();
        if self.dims(input).len() < 2 {
            return Err(Error::Shape("blur needs spatial dims".into()));
        }
        let hpass = blur_pass(self.value(input), &kernel, 1)?;
        let out = blur_pass(&hpass, &kernel, 0)?;
        Ok(self.push(out, OpKind::GaussianBlur { input, kernel }, false))
    }

    /// Spatial max pool, window `k`, stride `k` windows fully inside.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 {
            return Err(Error::Shape("max_pool2d wants [N,C,H,W]".into()));
        }
        if k < 1 || stride < 1 || xd[2] < k || xd[3] < k {
            return Err(Error::Config(format!(
                "max_pool2d window {k} stride {stride} on {}x{}",
                xd[2], xd[3]
            )));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = (p * h + oy * stride + ky) * w + ox * stride + kx;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(t, OpKind::MaxPool { input, arg }, false))
    }

    /// Stride-1 min over an odd `window`, neighborhood clipped at borders, so
    /// output dims equal input dims. The dark-channel spatial operator.
    pub fn min_pool_window(&mut self, input: Var, window: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 {
            return Err(Error::Shape("min_pool_window wants [N,C,H,W]".into()));
        }
        if window % 2 == 0 || window == 0 {
            return Err(Error::Config(format!(
                "min_pool_window requires an odd window, got {window}"
            )));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let r = (window / 2) as i64;
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        let mut arg = vec![0usize; x.len()];
        for p in 0..n * c {
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    let mut best = f64::INFINITY;
                    let mut best_i = 0usize;
                    for dy in -r..=r {
                        let yy = y + dy;
                        if yy < 0 || yy >= h as i64 {
                            continue;
                        }
                        for dx in -r..=r {
                            let xi = xx + dx;
                            if xi < 0 || xi >= w as i64 {
                                continue;
                            }
                            let i = (p * h + yy as usize) * w + xi as usize;
                            if x[i] < best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (p * h + y as usize) * w + xx as usize;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let t = Tensor::from_parts(xd, out);
        Ok(self.push(t, OpKind::MinPoolWindow { input, arg }, false))
    }

    /// Nearest-neighbor 2x spatial upsample.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 {
            return Err(Error::Shape("upsample2x wants [N,C,H,W]".into()));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(p * h + y) * w + xx];
                    let base = p * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out);
        Ok(self.push(t, OpKind::Upsample2x(input), false))
    }

    /// Concatenate along the channel axis of `[N,C,H,W]` tensors.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_channels: empty input list".into()));
        }
        let first = self.dims(inputs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::Shape("concat_channels wants [N,C,H,W]".into()));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &v in inputs {
            let d = self.dims(v);
            if d.len() != 4 || d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::Shape(format!(
                    "concat_channels: {d:?} incompatible with {first:?}"
                )));
            }
            c_total += d[1];
        }
        let mut out = vec![0.0; n * c_total * h * w];
        let hw = h * w;
        let mut c_off = 0;
        for &v in inputs {
            let ci = self.dims(v)[1];
            let x = self.value(v).data();
            for ni in 0..n {
                for c in 0..ci {
                    let src = (ni * ci + c) * hw;
                    let dst = (ni * c_total + c_off + c) * hw;
                    out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
                }
            }
            c_off += ci;
        }
        let t = Tensor::from_parts(vec![n, c_total, h, w], out);
        Ok(self.push(t, OpKind::ConcatChannels(inputs.to_vec()), false))
    }

    /// Slice `len` channels starting at `start`.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 || start + len > xd[1] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow_channels {start}..{} on {xd:?}",
                start + len
            )));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * len * hw];
        for ni in 0..n {
            for ci in 0..len {
                let src = (ni * c + start + ci) * hw;
                let dst = (ni * len + ci) * hw;
                out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
            }
        }
        let t = Tensor::from_parts(vec![n, len, h, w], out);
        Ok(self.push(t, OpKind::NarrowChannels { input, start, len }, false))
    }

    /// Reverse sweep: populate gradients of every `requires_grad` node
    /// reachable from the scalar `loss`. Consumes the tape's ability to
    /// run again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Contract(
                "tape already consumed by a previous backward".into(),
            ));
        }
        let loss_t = &self.nodes[loss.0].value;
        if loss_t.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_t.dims()
            )));
        }
        if !loss_t.data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        self.swept = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    self.nodes[i].grad =
                        Some(Tensor::from_parts(self.nodes[i].value.dims().to_vec(), g));
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[i].op {
            OpKind::Leaf => {}
            OpKind::Add(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g);
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g);
                }
            }
            OpKind::Sub(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            OpKind::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let c: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, &c);
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data();
                    let c: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, &c);
                }
            }
            OpKind::MulBroadcast(a, b) => {
                let ad = self.nodes[a.0].value.dims();
                let bd = self.nodes[b.0].value.dims();
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let mut c = vec![0.0; g.len()];
                    for_each_broadcast(ad, bd, |ai, bi| c[ai] = g[ai] * bv[bi]);
                    self.accum(grads, *a, &c);
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data();
                    let mut c = vec![0.0; self.nodes[b.0].value.len()];
                    for_each_broadcast(ad, bd, |ai, bi| c[bi] += g[ai] * av[ai]);
                    self.accum(grads, *b, &c);
                }
            }
            OpKind::AddScalar(a) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g);
                }
            }
            OpKind::Scale(a, s) => {
                if self.needs(*a) {
                    let c: Vec<f64> = g.iter().map(|x| x * s).collect();
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::Relu(a) => {
                if self.needs(*a) {
                    let x = self.nodes[a.0].value.data();
                    let c: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = self.nodes[i].value.data();
                    let c: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::Exp(a) => {
                if self.needs(*a) {
                    let y = self.nodes[i].value.data();
                    let c: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::Ln(a) => {
                if self.needs(*a) {
                    let x = self.nodes[a.0].value.data();
                    let c: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::Abs(a) => {
                if self.needs(*a) {
                    let x = self.nodes[a.0].value.data();
                    let c: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| gi * if *xi >= 0.0 { 1.0 } else { -1.0 })
                        .collect();
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::SumAll(a) => {
                if self.needs(*a) {
                    let c = vec![g[0]; self.nodes[a.0].value.len()];
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.len();
                    let c = vec![g[0] / n as f64; n];
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::Reduce {
                input,
                axis,
                op,
                arg,
            } => {
                if !self.needs(*input) {
                    return;
                }
                let in_dims = self.nodes[input.0].value.dims();
                let axis_len = in_dims[*axis];
                let inner: usize = in_dims[axis + 1..].iter().product();
                let outer: usize = in_dims[..*axis].iter().product();
                let mut c = vec![0.0; self.nodes[input.0].value.len()];
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let scale = if *op == ReduceOp::Mean {
                            1.0 / axis_len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for j in 0..inner {
                                let go = g[o * inner + j] * scale;
                                for k in 0..axis_len {
                                    c[(o * axis_len + k) * inner + j] += go;
                                }
                            }
                        }
                    }
                    ReduceOp::Max | ReduceOp::Min => {
                        for (oi, &src) in arg.iter().enumerate() {
                            c[src] += g[oi];
                        }
                    }
                }
                self.accum(grads, *input, &c);
            }
            OpKind::Conv2d {
                input,
                kernel,
                stride,
                padding,
                pad_mode,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let (gi, gk) = conv2d_backward(
                    x,
                    k,
                    g,
                    self.nodes[i].value.dims(),
                    *stride,
                    *padding,
                    *pad_mode,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(gi) = gi {
                    self.accum(grads, *input, &gi);
                }
                if let Some(gk) = gk {
                    self.accum(grads, *kernel, &gk);
                }
            }
            OpKind::BiasAdd(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g);
                }
                if self.needs(*b) {
                    let xd = self.nodes[a.0].value.dims();
                    let (n, f, hw) = (xd[0], xd[1], xd[2] * xd[3]);
                    let mut c = vec![0.0; f];
                    for ni in 0..n {
                        for fi in 0..f {
                            let base = (ni * f + fi) * hw;
                            c[fi] += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    self.accum(grads, *b, &c);
                }
            }
            OpKind::GaussianBlur { input, kernel } => {
                if self.needs(*input) {
                    let gt = Tensor::from_parts(self.nodes[i].value.dims().to_vec(), g.to_vec());
                    let v_adj = blur_pass_adjoint(&gt, kernel, 0);
                    let h_adj = blur_pass_adjoint(&v_adj, kernel, 1);
                    self.accum(grads, *input, h_adj.data());
                }
            }
            OpKind::MaxPool { input, arg } | OpKind::MinPoolWindow { input, arg } => {
                if self.needs(*input) {
                    let mut c = vec![0.0; self.nodes[input.0].value.len()];
                    for (oi, &src) in arg.iter().enumerate() {
                        c[src] += g[oi];
                    }
                    self.accum(grads, *input, &c);
                }
            }
            OpKind::Upsample2x(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.dims();
                    let (p, h, w) = (xd[0] * xd[1], xd[2], xd[3]);
                    let mut c = vec![0.0; self.nodes[a.0].value.len()];
                    for pi in 0..p {
                        for y in 0..h {
                            for x in 0..w {
                                let mut acc = 0.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        acc += g[pi * 4 * h * w + (2 * y + dy) * 2 * w + 2 * x + dx];
                                    }
                                }
                                c[(pi * h + y) * w + x] = acc;
                            }
                        }
                    }
                    self.accum(grads, *a, &c);
                }
            }
            OpKind::ConcatChannels(inputs) => {
                let od = self.nodes[i].value.dims();
                let (n, c_total, hw) = (od[0], od[1], od[2] * od[3]);
                let mut c_off = 0;
                for &v in inputs {
                    let ci = self.nodes[v.0].value.dims()[1];
                    if self.needs(v) {
                        let mut c = vec![0.0; self.nodes[v.0].value.len()];
                        for ni in 0..n {
                            for cc in 0..ci {
                                let src = (ni * c_total + c_off + cc) * hw;
                                let dst = (ni * ci + cc) * hw;
                                c[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
                            }
                        }
                        self.accum(grads, v, &c);
                    }
                    c_off += ci;
                }
            }
            OpKind::NarrowChannels { input, start, len } => {
                if self.needs(*input) {
                    let xd = self.nodes[input.0].value.dims();
                    let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
                    let mut out = vec![0.0; self.nodes[input.0].value.len()];
                    for ni in 0..n {
                        for ci in 0..*len {
                            let src = (ni * len + ci) * hw;
                            let dst = (ni * c + start + ci) * hw;
                            out[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
                        }
                    }
                    self.accum(grads, *input, &out);
                }
            }
        }
    }
}

/// Apply `f(a[i], b[bcast(i)])` elementwise, producing a tensor shaped like `a`.
fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = vec![0.0; a.len()];
    let (av, bv) = (a.data(), b.data());
    for_each_broadcast(a.dims(), b.dims(), |ai, bi| out[ai] = f(av[ai], bv[bi]));
    Tensor::from_parts(a.dims().to_vec(), out)
}

/// Visit every flat index of the full shape together with the flat index of
/// the broadcast operand.
fn for_each_broadcast(a_dims: &[usize], b_dims: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_dims.len();
    let n: usize = a_dims.iter().product();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_dims[d] == 1 { 0 } else { s };
        s *= b_dims[d];
    }
    let mut coords = vec![0usize; rank];
    for ai in 0..n {
        let bi: usize = coords
            .iter()
            .zip(&b_strides)
            .map(|(&c, &st)| c * st)
            .sum();
        f(ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < a_dims[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

fn reduce_forward(t: &Tensor, axis: usize, op: ReduceOp) -> (Tensor, Vec<usize>) {
    let dims = t.dims();
    let axis_len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out_dims = dims.to_vec();
    out_dims[axis] = 1;
    let mut out = vec![0.0; outer * inner];
    let mut arg = Vec::new();
    let x = t.data();
    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            for o in 0..outer {
                for j in 0..inner {
                    let mut acc = 0.0;
                    for k in 0..axis_len {
                        acc += x[(o * axis_len + k) * inner + j];
                    }
                    if op == ReduceOp::Mean {
                        acc /= axis_len as f64;
                    }
                    out[o * inner + j] = acc;
                }
            }
        }
        ReduceOp::Max | ReduceOp::Min => {
            arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for j in 0..inner {
                    let mut best_i = (o * axis_len) * inner + j;
                    let mut best = x[best_i];
                    for k in 1..axis_len {
                        let idx = (o * axis_len + k) * inner + j;
                        let better = if op == ReduceOp::Max {
                            x[idx] > best
                        } else {
                            x[idx] < best
                        };
                        if better {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                    out[o * inner + j] = best;
                    arg[o * inner + j] = best_i;
                }
            }
        }
    }
    (Tensor::from_parts(out_dims, out), arg)
}

fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (f, _, kh, kw) = (k.dims()[0], k.dims()[1], k.dims()[2], k.dims()[3]);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * f * oh * ow];
    let p = padding as i64;

    let run_row = |flat_row: usize, row: &mut [f64]| {
        // flat_row indexes (n, f, oy)
        let oy = flat_row % oh;
        let fi = (flat_row / oh) % f;
        let ni = flat_row / (oh * f);
        for ox in 0..ow {
            let mut acc = 0.0;
            for ci in 0..c {
                let x_base = (ni * c + ci) * h * w;
                let k_base = (fi * c + ci) * kh * kw;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as i64 - p;
                    match pad_mode {
                        PadMode::Zero => {
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let row_base = x_base + iy as usize * w;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - p;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += kd[k_base + ky * kw + kx] * xd[row_base + ix as usize];
                            }
                        }
                        PadMode::Reflect => {
                            let yy = reflect_index(iy, h);
                            let row_base = x_base + yy * w;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - p;
                                let xx = reflect_index(ix, w);
                                acc += kd[k_base + ky * kw + kx] * xd[row_base + xx];
                            }
                        }
                    }
                }
            }
            row[ox] = acc;
        }
    };

    if runtime::parallel_enabled() && n * f * oh > 1 {
        out.par_chunks_mut(ow)
            .enumerate()
            .for_each(|(r, row)| run_row(r, row));
    } else {
        for (r, row) in out.chunks_mut(ow).enumerate() {
            run_row(r, row);
        }
    }
    Tensor::from_parts(vec![n, f, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &[f64],
    out_dims: &[usize],
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (f, _, kh, kw) = (k.dims()[0], k.dims()[1], k.dims()[2], k.dims()[3]);
    let (oh, ow) = (out_dims[2], out_dims[3]);
    let xd = x.data();
    let kd = k.data();
    let p = padding as i64;
    let mut gi = if need_input { Some(vec![0.0; x.len()]) } else { None };
    let mut gk = if need_kernel { Some(vec![0.0; k.len()]) } else { None };

    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((ni * f + fi) * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let x_base = (ni * c + ci) * h * w;
                        let k_base = (fi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - p;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - p;
                                let (yy, xx) = match pad_mode {
                                    PadMode::Zero => {
                                        if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        (iy as usize, ix as usize)
                                    }
                                    PadMode::Reflect => {
                                        (reflect_index(iy, h), reflect_index(ix, w))
                                    }
                                };
                                let xi = x_base + yy * w + xx;
                                let ki = k_base + ky * kw + kx;
                                if let Some(gi) = gi.as_mut() {
                                    gi[xi] += go * kd[ki];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ki] += go * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gk)
}
