//! Dense 4-D tensors in NCHW layout and the numeric kernels the network is
//! built from: GEMM-backed convolution, bilinear resampling, pooling.
//!
//! Everything is `f64`. Training at desk scale is CPU bound either way, and
//! double precision keeps finite-difference gradient checks meaningful.

use std::ops::Range;

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(shape_err(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Number of values in one batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let l = self.item_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    /// Copy of batch item `n` as a tensor with batch size one.
    pub fn item_tensor(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.item(n).to_vec(),
        }
    }

    /// Stack batch-one (or larger) tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean over the channel axis, keeping it as a single channel.
    pub fn channel_mean(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            let src = self.item(b);
            let dst = out.item_mut(b);
            for ch in 0..c {
                for (d, s) in dst.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                    *d += s;
                }
            }
            let inv = 1.0 / c as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        concat_dim(parts, 1)
    }

    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        slice_dim(self, 1, range)
    }

    /// Bilinear resampling with half-pixel centres (the `align_corners =
    /// false` convention).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let plan = BilinearPlan::new(self.height(), self.width(), out_h, out_w);
        plan.forward(self)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        Tensor::from_fn([n, c, h * factor, w * factor], |[b, ch, y, x]| {
            self.get([b, ch, y / factor, x / factor])
        })
    }

    /// SHA-256 over shape and little-endian values.
    pub fn digest_into(&self, hasher: &mut Sha256) {
        for d in self.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
    }
}

fn split_dims(shape: [usize; 4], dim: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

/// Concatenate tensors along `dim` (1, 2 or 3). All other axes must agree.
pub fn concat_dim(parts: &[&Tensor], dim: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("cannot concatenate an empty list"))?;
    let mut shape = first.shape;
    shape[dim] = 0;
    for p in parts {
        for (axis, (&a, &b)) in p.shape.iter().zip(first.shape.iter()).enumerate() {
            if axis != dim && a != b {
                return Err(shape_err(format!(
                    "concat along {dim}: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
        }
        shape[dim] += p.shape[dim];
    }
    let (outer, _, inner) = split_dims(first.shape, dim);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape[dim] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn slice_dim(t: &Tensor, dim: usize, range: Range<usize>) -> Result<Tensor> {
    if range.end > t.shape[dim] || range.start > range.end {
        return Err(shape_err(format!(
            "slice {range:?} out of bounds for axis {dim} of {:?}",
            t.shape
        )));
    }
    let (outer, len, inner) = split_dims(t.shape, dim);
    let mut shape = t.shape;
    shape[dim] = range.len();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&t.data[base + range.start * inner..base + range.end * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Scatter `grad` (shaped like a slice) back into a zero tensor of `full`
/// shape.
pub(crate) fn unslice_dim(grad: &Tensor, full: [usize; 4], dim: usize, start: usize) -> Tensor {
    let (outer, len, inner) = split_dims(full, dim);
    let mut out = Tensor::zeros(full);
    let seg = grad.shape[dim] * inner;
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out.data[base..base + seg].copy_from_slice(&grad.data[o * seg..(o + 1) * seg]);
    }
    out
}

/// `C = A·B + beta·C` on row-major buffers, with optional transposes.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when
/// `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches for
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfold one `C×H×W` item into a `(C·k·k) × (Ho·Wo)` matrix.
    fn im2col(&self, input: &[f64], col: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulate a column matrix into an item.
    fn col2im(&self, col: &[f64], out: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &mut out[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let [_, c, h, w] = input.shape();
    let [_, wc, kh, kw] = weight.shape();
    if wc != c || kh != kw {
        return Err(shape_err(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
        return Err(shape_err(format!(
            "conv kernel {kh} stride {stride} pad {pad} does not fit input {:?}",
            input.shape()
        )));
    }
    Ok(ConvGeom {
        in_c: c,
        in_h: h,
        in_w: w,
        kernel: kh,
        stride,
        pad,
    })
}

/// Cross-correlation `out[n,o] = Σ_c w[o,c] ⋆ x[n,c] + b[o]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geom = conv_geom(input, weight, stride, pad)?;
    let out_c = weight.batch();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let n = input.batch();
    let mut out = Tensor::zeros([n, out_c, oh, ow]);
    let rows = geom.col_rows();
    let cols = geom.col_cols();
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..n {
        let x = input.item(b);
        let dst = out.item_mut(b);
        let col_ref: &[f64] = if geom.is_pointwise() {
            x
        } else {
            geom.im2col(x, &mut col);
            &col
        };
        gemm(out_c, rows, cols, weight.data(), false, col_ref, false, 0.0, dst);
        if let Some(bias) = bias {
            for (o, plane) in dst.chunks_mut(cols).enumerate() {
                let bv = bias.data()[o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let geom = conv_geom(input, weight, stride, pad).expect("shapes checked in forward");
    let out_c = weight.batch();
    let rows = geom.col_rows();
    let cols = geom.col_cols();
    let n = input.batch();
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros([1, out_c, 1, 1]);
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![0.0; rows * cols];
    for b in 0..n {
        let x = input.item(b);
        let gy = grad_out.item(b);
        for (o, plane) in gy.chunks(cols).enumerate() {
            grad_b.data_mut()[o] += plane.iter().sum::<f64>();
        }
        if geom.is_pointwise() {
            gemm(out_c, cols, rows, gy, false, x, true, 1.0, grad_w.data_mut());
        } else {
            geom.im2col(x, &mut col);
            gemm(out_c, cols, rows, gy, false, &col, true, 1.0, grad_w.data_mut());
        }
        if let Some(gi) = grad_in.as_mut() {
            if geom.is_pointwise() {
                gemm(rows, out_c, cols, weight.data(), true, gy, false, 0.0, gi.item_mut(b));
            } else {
                gemm(rows, out_c, cols, weight.data(), true, gy, false, 0.0, &mut col);
                geom.col2im(&col, gi.item_mut(b));
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Precomputed taps for separable bilinear resampling.
#[derive(Clone, Debug)]
pub struct BilinearPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        BilinearPlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let [n, c, h, w] = input.shape();
        debug_assert_eq!((h, w), (self.in_h, self.in_w));
        let mut out = Tensor::zeros([n, c, self.out_h, self.out_w]);
        let (ip, op) = (h * w, self.out_h * self.out_w);
        for (src, dst) in input.data().chunks(ip).zip(out.data_mut().chunks_mut(op)) {
            for (oy, &(y0, y1, ly)) in self.rows.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                for (ox, &(x0, x1, lx)) in self.cols.iter().enumerate() {
                    let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                    let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                    dst[oy * self.out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::forward`].
    pub fn backward(&self, grad: &Tensor) -> Tensor {
        let [n, c, _, _] = grad.shape();
        let mut out = Tensor::zeros([n, c, self.in_h, self.in_w]);
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let w = self.in_w;
        for (g, dst) in grad.data().chunks(op).zip(out.data_mut().chunks_mut(ip)) {
            for (oy, &(y0, y1, ly)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in self.cols.iter().enumerate() {
                    let v = g[oy * self.out_w + ox];
                    dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                    dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                    dst[y1 * w + x0] += v * ly * (1.0 - lx);
                    dst[y1 * w + x1] += v * ly * lx;
                }
            }
        }
        out
    }
}

/// 2-D max pooling with `-inf` padding.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = input.shape();
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    Tensor::from_fn([n, c, oh, ow], |[b, ch, oy, ox]| {
        let mut m = f64::NEG_INFINITY;
        for ky in 0..kernel {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..kernel {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                m = m.max(input.get([b, ch, iy as usize, ix as usize]));
            }
        }
        m
    })
}
