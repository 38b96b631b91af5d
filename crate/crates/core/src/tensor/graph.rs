//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse and deposits parameter gradients into their shared
//! storage; a second call on the same tape is rejected until `reset`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Geometry, Padding};
use super::{Param, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Param(Param),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    ReverseRows(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: Geometry,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: Geometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Scalar node whose local gradient was computed alongside the forward value.
    Precomputed {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Drops the recorded tape so the graph can be reused for another step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.backward_done = false;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter leaf. Repeated uses of the same storage within one
    /// tape resolve to the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.param_vars.get(&p.key()) {
            return v;
        }
        let value = p.value().clone();
        let v = self.push(value, Op::Param(p.clone()));
        self.param_vars.insert(p.key(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// Element-wise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let t = self.value(a).zip_map(&c, "mul_const", |x, y| x * y)?;
        Ok(self.push(t, Op::MulConst(a, c)))
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        if axis >= xs.rank() || bs.len() != xs.shape()[axis] {
            return Err(Error::shape("add_bias", xs.shape(), bs.shape()));
        }
        let (outer, len, inner) = xs.axis_extents(axis);
        let mut out = xs.data().to_vec();
        let b = bs.data();
        for o in 0..outer {
            for (k, &bk) in b.iter().enumerate() {
                let base = (o * len + k) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bk;
                }
            }
        }
        let t = Tensor::from_parts(xs.shape().to_vec(), out);
        Ok(self.push(t, Op::AddBias { x, bias, axis }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat(&values, axis)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", &shape, sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverses the order of the leading axis.
    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let t = reverse_leading(self.value(x));
        self.push(t, Op::ReverseRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Standard 2-D cross-correlation: `x: (n, c, h, w)`, `w: (o, c, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let geom = Geometry::new((h, wd), (kh, kw), stride, padding)?;
        let out =
            kernels::conv2d_forward(self.value(x).data(), n, c, self.value(w).data(), o, &geom);
        let t = Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out);
        Ok(self.push(t, Op::Conv2d { x, w, geom }))
    }

    /// Per-channel cross-correlation: `x: (n, c, h, w)`, `w: (c, 1, kh, kw)`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[1] != 1 {
            return Err(Error::shape("depthwise_conv2d", xs, ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let geom = Geometry::new((h, wd), (ws[2], ws[3]), stride, padding)?;
        let out =
            kernels::depthwise_forward(self.value(x).data(), n, c, self.value(w).data(), &geom);
        let t = Tensor::from_parts(vec![n, c, geom.oh, geom.ow], out);
        Ok(self.push(t, Op::Depthwise { x, w, geom }))
    }

    /// Max pooling with floor semantics: trailing rows/columns that do not
    /// fill a window are dropped.
    pub fn maxpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2d", xs, &[window.0, window.1]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let geom = Geometry::new((h, w), window, stride, Padding::Valid)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, &geom);
        let t = Tensor::from_parts(vec![n, c, geom.oh, geom.ow], out);
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Training-mode batch normalization over every axis except 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xs = self.value(x);
        let c = self.check_channel_affine("batch_norm", x, gamma, beta)?;
        let (outer, _, inner) = xs.axis_extents(1);
        let count = outer * inner;
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch normalization needs at least 2 values per channel, got {count}"
            )));
        }
        let data = xs.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *m += data[base..base + inner].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += data[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize_channels(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Per-channel normalization with fixed statistics (evaluation-mode batch
    /// normalization).
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_channel_affine("frozen_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("frozen_norm", &[c], &[mean.len(), var.len()]));
        }
        if let Some(v) = var.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::Corrupt(format!("running variance {v} is negative")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize_channels(x, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Layer normalization over all non-batch axes with a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.check_channel_affine("layer_norm", x, gamma, beta)?;
        let xs = self.value(x);
        let n = xs.shape()[0];
        let per = xs.len() / n;
        let inner = per / c;
        let data = xs.data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(n);
        for s in 0..n {
            let row = &data[s * per..(s + 1) * per];
            let mean = row.iter().sum::<f64>() / per as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (k, v) in row.iter().enumerate() {
                let ch = k / inner;
                let xh = (v - mean) * is;
                xhat[s * per + k] = xh;
                out[s * per + k] = xh * g[ch] + b[ch];
            }
        }
        let shape = xs.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape.clone(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::from_parts(shape, xhat),
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, Tensor::from_parts(shape, mask))
    }

    /// Appends a scalar node with value `value` whose gradient with respect to
    /// `x` is `grad` (same shape as `x`).
    pub fn precomputed(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("precomputed", self.shape(x), grad.shape()));
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }))
    }

    fn check_channel_affine(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<usize> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape(op, xs, self.shape(gamma)));
        }
        let c = xs[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(op, xs, self.shape(gamma)));
        }
        Ok(c)
    }

    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Tensor) {
        let xs = self.value(x);
        let (outer, c, inner) = xs.axis_extents(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xs.data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for k in base..base + inner {
                    let xh = (data[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = xh * g[ch] + b[ch];
                }
            }
        }
        let shape = xs.shape().to_vec();
        (
            Tensor::from_parts(shape.clone(), xhat),
            Tensor::from_parts(shape, out),
        )
    }

    /// Fills the gradient of every reachable parameter with d(output)/d(param),
    /// accumulated across all of that parameter's uses.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !self.value(output).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::ones(self.shape(output)));

        for i in (0..=output.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => p.accumulate_grad(&gout),
                Op::Add(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, gout.clone());
                    accumulate(&mut grads, &self.nodes, *b, gout);
                }
                Op::Sub(a, b) => {
                    let neg = gout.map(|g| -g);
                    accumulate(&mut grads, &self.nodes, *a, gout);
                    accumulate(&mut grads, &self.nodes, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&gout, self.value(*b), |g, y| g * y);
                    let gb = zip(&gout, self.value(*a), |g, x| g * x);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, &self.nodes, *a, gout.map(|g| g * s));
                }
                Op::MulConst(a, c) => {
                    let ga = zip(&gout, c, |g, m| g * m);
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::AddBias { x, bias, axis } => {
                    let (outer, len, inner) = gout.axis_extents(*axis);
                    let mut gb = vec![0.0; len];
                    let d = gout.data();
                    for o in 0..outer {
                        for (k, acc) in gb.iter_mut().enumerate() {
                            let base = (o * len + k) * inner;
                            *acc += d[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    let bshape = self.shape(*bias).to_vec();
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *bias,
                        Tensor::from_parts(bshape, gb),
                    );
                    accumulate(&mut grads, &self.nodes, *x, gout);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gout.data(), false, bv.data(), true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, gout.data(), false, &mut gb, 0.0);
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *a,
                        Tensor::from_parts(vec![m, k], ga),
                    );
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *b,
                        Tensor::from_parts(vec![k, n], gb),
                    );
                }
                Op::Tanh(a) => {
                    let g = zip(&gout, &node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = zip(&gout, &node.value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::Relu(a) => {
                    let g = zip(&gout, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = y.axis_extents(*axis);
                    let (yd, gd) = (y.data(), gout.data());
                    let mut gx = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|k| yd[base + k * inner] * gd[base + k * inner])
                                .sum();
                            for k in 0..len {
                                let idx = base + k * inner;
                                gx[idx] = yd[idx] * (gd[idx] - dot);
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *x,
                        Tensor::from_parts(y.shape().to_vec(), gx),
                    );
                }
                Op::Concat { parts, axis } => {
                    let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[*axis]).collect();
                    let pieces = gout.split(*axis, &sizes)?;
                    for (p, g) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, &self.nodes, *p, g);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let slot = grads[x.0]
                        .get_or_insert_with(|| Tensor::zeros(self.nodes[x.0].value.shape()));
                    let (outer, full, inner) = slot.axis_extents(*axis);
                    let len = gout.shape()[*axis];
                    let dst = slot.data_mut();
                    let src = gout.data();
                    for o in 0..outer {
                        let db = o * full * inner + start * inner;
                        let sb = o * len * inner;
                        for k in 0..len * inner {
                            dst[db + k] += src[sb + k];
                        }
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        *x,
                        Tensor::from_parts(shape, gout.into_data()),
                    );
                }
                Op::ReverseRows(x) => {
                    accumulate(&mut grads, &self.nodes, *x, reverse_leading(&gout));
                }
                Op::Sum(x) => {
                    let g = gout.item();
                    accumulate(&mut grads, &self.nodes, *x, Tensor::full(self.shape(*x), g));
                }
                Op::Conv2d { x, w, geom } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, c) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let (dx, dw) =
                        kernels::conv2d_backward(xv.data(), n, c, wv.data(), o, geom, gout.data());
                    let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
                    accumulate(&mut grads, &self.nodes, *w, Tensor::from_parts(ws, dw));
                    accumulate(&mut grads, &self.nodes, *x, Tensor::from_parts(xs, dx));
                }
                Op::Depthwise { x, w, geom } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, c) = (xv.shape()[0], xv.shape()[1]);
                    let (dx, dw) =
                        kernels::depthwise_backward(xv.data(), n, c, wv.data(), geom, gout.data());
                    let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
                    accumulate(&mut grads, &self.nodes, *w, Tensor::from_parts(ws, dw));
                    accumulate(&mut grads, &self.nodes, *x, Tensor::from_parts(xs, dx));
                }
                Op::MaxPool { x, argmax } => {
                    let slot = grads[x.0]
                        .get_or_insert_with(|| Tensor::zeros(self.nodes[x.0].value.shape()));
                    let dst = slot.data_mut();
                    for (g, &idx) in gout.data().iter().zip(argmax) {
                        dst[idx] += g;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let (outer, c, inner) = xhat.axis_extents(1);
                    let count = (outer * inner) as f64;
                    let (xh, gd) = (xhat.data(), gout.data());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                dgamma[ch] += gd[k] * xh[k];
                                dbeta[ch] += gd[k];
                            }
                        }
                    }
                    // dxhat = dy·gamma; sums of dxhat and dxhat·xhat follow from dbeta/dgamma.
                    let mut dx = vec![0.0; xh.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let s1 = dbeta[ch] * gv[ch];
                            let s2 = dgamma[ch] * gv[ch];
                            for k in base..base + inner {
                                let dxh = gd[k] * gv[ch];
                                dx[k] = inv_std[ch] / count * (count * dxh - s1 - xh[k] * s2);
                            }
                        }
                    }
                    let shape = xhat.shape().to_vec();
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        gamma,
                        Tensor::from_parts(vec![c], dgamma),
                    );
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        beta,
                        Tensor::from_parts(vec![c], dbeta),
                    );
                    accumulate(&mut grads, &self.nodes, x, Tensor::from_parts(shape, dx));
                }
                Op::FrozenNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let (outer, c, inner) = xhat.axis_extents(1);
                    let (xh, gd) = (xhat.data(), gout.data());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; xh.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                dgamma[ch] += gd[k] * xh[k];
                                dbeta[ch] += gd[k];
                                dx[k] = gd[k] * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                    let shape = xhat.shape().to_vec();
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        gamma,
                        Tensor::from_parts(vec![c], dgamma),
                    );
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        beta,
                        Tensor::from_parts(vec![c], dbeta),
                    );
                    accumulate(&mut grads, &self.nodes, x, Tensor::from_parts(shape, dx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let n = xhat.shape()[0];
                    let c = xhat.shape()[1];
                    let per = xhat.len() / n;
                    let inner = per / c;
                    let (xh, gd) = (xhat.data(), gout.data());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; xh.len()];
                    for (s, &istd) in inv_std.iter().enumerate().take(n) {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..per {
                            let idx = s * per + k;
                            let ch = k / inner;
                            dgamma[ch] += gd[idx] * xh[idx];
                            dbeta[ch] += gd[idx];
                            let dxh = gd[idx] * gv[ch];
                            s1 += dxh;
                            s2 += dxh * xh[idx];
                        }
                        let m = per as f64;
                        for k in 0..per {
                            let idx = s * per + k;
                            let dxh = gd[idx] * gv[k / inner];
                            dx[idx] = istd / m * (m * dxh - s1 - xh[idx] * s2);
                        }
                    }
                    let shape = xhat.shape().to_vec();
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        gamma,
                        Tensor::from_parts(vec![c], dgamma),
                    );
                    accumulate(
                        &mut grads,
                        &self.nodes,
                        beta,
                        Tensor::from_parts(vec![c], dbeta),
                    );
                    accumulate(&mut grads, &self.nodes, x, Tensor::from_parts(shape, dx));
                }
                Op::Precomputed { x, grad } => {
                    let s = gout.item();
                    accumulate(&mut grads, &self.nodes, *x, grad.map(|g| g * s));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    // Constant leaves never need gradients.
    if matches!(nodes[v.0].op, Op::Leaf) {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn reverse_leading(t: &Tensor) -> Tensor {
    let rows = t.shape()[0];
    let width = t.len() / rows;
    let mut out = Vec::with_capacity(t.len());
    for r in (0..rows).rev() {
        out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let p = Param::new(
            "x",
            Tensor::from_slice(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]),
        );
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&p);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(p.grad().data(), &[1.0; 6]);
    }

    #[test]
    fn shared_use_accumulates() {
        // f(w) = w·a + w·b with a = 2, b = 3 → df/dw = 5
        let w = Param::new("w", Tensor::scalar(0.7));
        let mut g = Graph::new(Mode::Train, 0);
        let a = g.input(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let w1 = g.param(&w);
        let w2 = g.param(&w.clone());
        let left = g.mul(w1, a).unwrap();
        let right = g.mul(w2, b).unwrap();
        let out = g.add(left, right).unwrap();
        g.backward(out).unwrap();
        assert_eq!(w.grad().item(), 5.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let p = Param::new("x", Tensor::scalar(0.0));
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&p);
        let y = g.sigmoid(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!((p.grad().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn second_backward_is_rejected() {
        let p = Param::new("x", Tensor::scalar(1.0));
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&p);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        g.reset();
        let x = g.param(&p);
        let s = g.sum(x);
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::new(Mode::Eval, 1);
        let x = g.input(Tensor::ones(&[100]));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::new(Mode::Train, 1);
        let x = g.input(Tensor::ones(&[100]));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        let y = g.dropout(x, 0.5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let p = Param::new("x", Tensor::full(&[1, 1, 2, 2], 3.0));
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.param(&p);
        let y = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(p.grad().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
