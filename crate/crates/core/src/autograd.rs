//! A tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every parameter leaf that took part in the computation.
//! Graphs are single-use: build one per forward pass.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::tensor::{concat_dim, conv2d, conv2d_backward, slice_dim, unslice_dim, BilinearPlan, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running averages once the step is accepted.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
}

enum Op {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    HardSwish(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Mean {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    Slice {
        x: Var,
        dim: usize,
        start: usize,
    },
    Resize {
        x: Var,
        plan: BilinearPlan,
    },
    Softmax(Var),
    L1 {
        p: Var,
        target: Tensor,
    },
    Focal {
        p: Var,
        target: Tensor,
        params: FocalParams,
    },
    Weighted(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    bn_observations: Vec<BnObservation>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    vars: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }
}

/// Strides into a broadcast operand: zero along axes where it has extent 1.
fn broadcast_strides(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut strides = [0; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        if b[axis] == a[axis] {
            strides[axis] = acc;
        } else if b[axis] == 1 {
            strides[axis] = 0;
        } else {
            return Err(shape_err(format!("cannot broadcast {b:?} onto {a:?}")));
        }
        acc *= b[axis];
    }
    Ok(strides)
}

fn for_each_broadcast(shape: [usize; 4], bs: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut ai = 0;
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                let row = n * bs[0] + c * bs[1] + y * bs[2];
                for x in 0..shape[3] {
                    f(ai, row + x * bs[3]);
                    ai += 1;
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            bn_observations: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is recorded (used by tests and gradient probes).
    pub fn tracked_input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(name.to_owned()), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Batch normalisation over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics are used and recorded under
    /// `prefix`; otherwise `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        eps: f64,
        prefix: &str,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("batch norm over {c} channels given mismatched affine")));
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var) = if self.training {
            let xv = self.value(x);
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += xv.item(b)[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for b in 0..n {
                for ch in 0..c {
                    var[ch] += xv.item(b)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let unbiased = if count > 1 {
                var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
            } else {
                var.clone()
            };
            self.bn_observations.push(BnObservation {
                prefix: prefix.to_owned(),
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, var)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                let src = &xv.item(b)[r.clone()];
                let xh = &mut xhat.item_mut(b)[r.clone()];
                for (d, s) in xh.iter_mut().zip(src) {
                    *d = (s - mean[ch]) * inv_std[ch];
                }
                let o = &mut out.item_mut(b)[r.clone()];
                for (d, s) in o.iter_mut().zip(&xhat.item(b)[r]) {
                    *d = g[ch] * s + bt[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let training = self.training;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    /// `x · relu6(x + 3) / 6`.
    pub fn hard_swish(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0);
        let needs = self.needs(x);
        self.push(v, Op::HardSwish(x), needs)
    }

    /// `a + b`, with `b` broadcast along axes where it has extent one.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let bs = broadcast_strides(av.shape(), bv.shape())?;
        let mut out = av.clone();
        let od = out.data_mut();
        let bd = bv.data();
        for_each_broadcast(av.shape(), bs, |ai, bi| od[ai] += bd[bi]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// `a ⊙ b`, with `b` broadcast along axes where it has extent one.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let bs = broadcast_strides(av.shape(), bv.shape())?;
        let mut out = av.clone();
        let od = out.data_mut();
        let bd = bv.data();
        for_each_broadcast(av.shape(), bs, |ai, bi| od[ai] *= bd[bi]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Mean over spatial axis 2 (rows) or 3 (columns), keeping the axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis != 2 && axis != 3 {
            return Err(shape_err(format!("mean_axis supports axes 2 and 3, got {axis}")));
        }
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let out = if axis == 3 {
            Tensor::from_fn([n, c, h, 1], |[b, ch, y, _]| {
                (0..w).map(|xx| xv.get([b, ch, y, xx])).sum::<f64>() / w as f64
            })
        } else {
            Tensor::from_fn([n, c, 1, w], |[b, ch, _, xx]| {
                (0..h).map(|y| xv.get([b, ch, y, xx])).sum::<f64>() / h as f64
            })
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Mean { x, axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concat_dim(&vals, dim)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                dim,
            },
            needs,
        ))
    }

    pub fn slice(&mut self, x: Var, dim: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let start = range.start;
        let v = slice_dim(self.value(x), dim, range)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Slice { x, dim, start }, needs))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let plan = BilinearPlan::new(xv.height(), xv.width(), out_h, out_w);
        let v = plan.forward(xv);
        let needs = self.needs(x);
        self.push(v, Op::Resize { x, plan }, needs)
    }

    /// Bilinear ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.value(x).shape();
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            let src = xv.item(b);
            let dst = out.item_mut(b);
            for p in 0..plane {
                let m = (0..c).map(|ch| src[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[ch * plane + p] - m).exp();
                    dst[ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[ch * plane + p] /= z;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Pixel-mean absolute error against a fixed target.
    pub fn l1_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(p);
        pv.expect_shape(target.shape(), "l1 target")?;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pv.len() as f64;
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                p,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// Pixel-mean focal loss of anomaly probabilities against a binary
    /// target (`target ≥ 0.5` is the positive class).
    pub fn focal_loss(&mut self, p: Var, target: &Tensor, params: FocalParams) -> Result<Var> {
        let pv = self.value(p);
        pv.expect_shape(target.shape(), "focal target")?;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| focal_term(p, t, params))
            .sum::<f64>()
            / pv.len() as f64;
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                p,
                target: target.clone(),
                params,
            },
            needs,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err("weighted_sum expects scalar terms"));
            }
            s += w * t.data()[0];
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(s), Op::Weighted(terms.to_vec()), needs))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Input = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(name) => match params.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                },
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        self.needs(*x),
                    );
                    if let Some(gx) = gx {
                        send(&mut grads, *x, gx);
                    }
                    send(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let shape = self.value(*b).shape();
                        send(&mut grads, *b, gb.reshape(shape).expect("bias shape"));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let [n, c, h, w] = g.shape();
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = ch * plane..(ch + 1) * plane;
                            for (dy, xh) in g.item(b)[r.clone()].iter().zip(&xhat.item(b)[r]) {
                                sum_dy[ch] += dy;
                                sum_dy_xhat[ch] += dy * xh;
                            }
                        }
                    }
                    let gamma_v = self.value(*gamma).data();
                    if self.needs(*x) {
                        let mut gx = Tensor::zeros(g.shape());
                        for b in 0..n {
                            for ch in 0..c {
                                let r = ch * plane..(ch + 1) * plane;
                                let scale = gamma_v[ch] * inv_std[ch];
                                let dy = &g.item(b)[r.clone()];
                                let xh = &xhat.item(b)[r.clone()];
                                let dst = &mut gx.item_mut(b)[r];
                                for i in 0..plane {
                                    dst[i] = if *training {
                                        scale
                                            * (dy[i]
                                                - sum_dy[ch] / count
                                                - xh[i] * sum_dy_xhat[ch] / count)
                                    } else {
                                        scale * dy[i]
                                    };
                                }
                            }
                        }
                        send(&mut grads, *x, gx);
                    }
                    let shape = self.value(*gamma).shape();
                    send(
                        &mut grads,
                        *gamma,
                        Tensor::from_vec(shape, sum_dy_xhat).expect("gamma shape"),
                    );
                    send(
                        &mut grads,
                        *beta,
                        Tensor::from_vec(shape, sum_dy).expect("beta shape"),
                    );
                }
                Op::Relu(x) => {
                    let gx = g
                        .zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })
                        .expect("same shape");
                    send(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g
                        .zip_map(&node.value, |g, y| g * y * (1.0 - y))
                        .expect("same shape");
                    send(&mut grads, *x, gx);
                }
                Op::HardSwish(x) => {
                    let gx = g
                        .zip_map(self.value(*x), |g, v| {
                            g * if v <= -3.0 {
                                0.0
                            } else if v >= 3.0 {
                                1.0
                            } else {
                                (2.0 * v + 3.0) / 6.0
                            }
                        })
                        .expect("same shape");
                    send(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        let bshape = self.value(*b).shape();
                        let bs = broadcast_strides(g.shape(), bshape).expect("checked");
                        let mut gb = Tensor::zeros(bshape);
                        let gbd = gb.data_mut();
                        let gd = g.data();
                        for_each_broadcast(g.shape(), bs, |ai, bi| gbd[bi] += gd[ai]);
                        send(&mut grads, *b, gb);
                    }
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let bs = broadcast_strides(av.shape(), bv.shape()).expect("checked");
                    if self.needs(*b) {
                        let mut gb = Tensor::zeros(bv.shape());
                        let gbd = gb.data_mut();
                        let (gd, ad) = (g.data(), av.data());
                        for_each_broadcast(g.shape(), bs, |ai, bi| gbd[bi] += gd[ai] * ad[ai]);
                        send(&mut grads, *b, gb);
                    }
                    if self.needs(*a) {
                        let mut ga = g;
                        let gad = ga.data_mut();
                        let bd = bv.data();
                        for_each_broadcast(av.shape(), bs, |ai, bi| gad[ai] *= bd[bi]);
                        send(&mut grads, *a, ga);
                    }
                }
                Op::Mean { x, axis } => {
                    let shape = self.value(*x).shape();
                    let (len, gx) = if *axis == 3 {
                        let w = shape[3] as f64;
                        (w, Tensor::from_fn(shape, |[b, c, y, _]| g.get([b, c, y, 0]) / w))
                    } else {
                        let h = shape[2] as f64;
                        (h, Tensor::from_fn(shape, |[b, c, _, xx]| g.get([b, c, 0, xx]) / h))
                    };
                    debug_assert!(len > 0.0);
                    send(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape();
                    send(&mut grads, *x, g.reshape(shape).expect("same length"));
                }
                Op::Concat { parts, dim } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).shape()[*dim];
                        if self.needs(p) {
                            let gp = slice_dim(&g, *dim, start..start + len).expect("in range");
                            send(&mut grads, p, gp);
                        }
                        start += len;
                    }
                }
                Op::Slice { x, dim, start } => {
                    let full = self.value(*x).shape();
                    send(&mut grads, *x, unslice_dim(&g, full, *dim, *start));
                }
                Op::Resize { x, plan } => {
                    send(&mut grads, *x, plan.backward(&g));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let [n, c, h, w] = y.shape();
                    let plane = h * w;
                    let mut gx = Tensor::zeros(y.shape());
                    for b in 0..n {
                        let (yi, gi) = (y.item(b), g.item(b));
                        let dst = gx.item_mut(b);
                        for p in 0..plane {
                            let dot: f64 = (0..c).map(|ch| yi[ch * plane + p] * gi[ch * plane + p]).sum();
                            for ch in 0..c {
                                let k = ch * plane + p;
                                dst[k] = yi[k] * (gi[k] - dot);
                            }
                        }
                    }
                    send(&mut grads, *x, gx);
                }
                Op::L1 { p, target } => {
                    let scale = g.data()[0] / target.len() as f64;
                    let gp = self
                        .value(*p)
                        .zip_map(target, |a, b| {
                            let d = a - b;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .expect("same shape");
                    send(&mut grads, *p, gp);
                }
                Op::Focal { p, target, params } => {
                    let scale = g.data()[0] / target.len() as f64;
                    let gp = self
                        .value(*p)
                        .zip_map(target, |p, t| scale * focal_grad(p, t, *params))
                        .expect("same shape");
                    send(&mut grads, *p, gp);
                }
                Op::Weighted(terms) => {
                    let gv = g.data()[0];
                    for &(v, w) in terms {
                        send(&mut grads, v, Tensor::scalar(gv * w));
                    }
                }
            }
        }
        Gradients {
            params,
            vars: grads,
        }
    }
}

/// One pixel of the focal loss: `−α (1 − p_t)^γ ln p_t`.
pub fn focal_term(p: f64, target: f64, params: FocalParams) -> f64 {
    let pc = p.clamp(params.eps, 1.0 - params.eps);
    let pt = if target >= 0.5 { pc } else { 1.0 - pc };
    -params.alpha * (1.0 - pt).powf(params.gamma) * pt.ln()
}

fn focal_grad(p: f64, target: f64, params: FocalParams) -> f64 {
    if p <= params.eps || p >= 1.0 - params.eps {
        return 0.0;
    }
    let positive = target >= 0.5;
    let pt = if positive { p } else { 1.0 - p };
    let q = 1.0 - pt;
    let modulating = if params.gamma == 0.0 {
        0.0
    } else {
        params.gamma * q.powf(params.gamma - 1.0) * pt.ln()
    };
    let d_pt = params.alpha * (modulating - q.powf(params.gamma) / pt);
    if positive {
        d_pt
    } else {
        -d_pt
    }
}
