//! Forward and vector-Jacobian kernels on raw tensors.
//!
//! Batched image tensors are `[B, C, H, W]`. All reductions run in a fixed
//! serial order; the per-sample work of batched kernels never depends on the
//! other samples in the batch.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{gemm, MatView, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k % 2 == 0 || stride == 0 {
            return Err(invalid("conv2d", "kernel must be odd and stride positive"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(invalid("conv2d", "output size is not integral"));
        }
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            ho: (span_h - k) / stride + 1,
            wo: (span_w - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    if x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3) {
        return Err(shape_err("conv2d", w.shape(), x.shape()));
    }
    let g = ConvGeom::new(x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad)?;
    Ok((x.dim(0), w.dim(0), g))
}

/// Cross-correlation with zero padding; `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (b, c_out, g) = conv_dims(x, w, stride, pad)?;
    if let Some(bias) = bias {
        if bias.len() != c_out {
            return Err(shape_err("conv2d bias", &[c_out], bias.shape()));
        }
    }
    let (kk, p) = (g.rows(), g.cols());
    let in_sz = g.c_in * g.h * g.w;
    let mut out = Tensor::zeros(&[b, c_out, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for s in 0..b {
        let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let o = &mut out.data_mut()[s * c_out * p..(s + 1) * c_out * p];
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(c_out, kk, p, T::one(), w.data(), MatView::rows(0, kk), src, MatView::rows(0, p), beta, o, MatView::rows(0, p));
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c_out, g) = conv_dims(x, w, stride, pad)?;
    let (kk, p) = (g.rows(), g.cols());
    let in_sz = g.c_in * g.h * g.w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    for s in 0..b {
        let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
        let dys = &dy.data()[s * c_out * p..(s + 1) * c_out * p];
        for (co, chunk) in dys.chunks(p).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            db.data_mut()[co] += acc;
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(c_out, p, kk, T::one(), dys, MatView::rows(0, p), src, MatView::transposed(0, p), T::one(), dw.data_mut(), MatView::rows(0, kk));
        let dxs = &mut dx.data_mut()[s * in_sz..(s + 1) * in_sz];
        if g.is_pointwise() {
            gemm(kk, c_out, p, T::one(), w.data(), MatView::transposed(0, kk), dys, MatView::rows(0, p), T::zero(), dxs, MatView::rows(0, p));
        } else {
            gemm(kk, c_out, p, T::one(), w.data(), MatView::transposed(0, kk), dys, MatView::rows(0, p), T::zero(), &mut dcols, MatView::rows(0, p));
            col2im(&dcols, &g, dxs);
        }
    }
    Ok((dx, dw, db))
}

/// Saved statistics of a group normalization, one entry per (sample, group).
#[derive(Clone, Debug)]
pub struct GnStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn gn_dims<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 || groups == 0 || x.dim(1) % groups != 0 {
        return Err(invalid("group_norm", "channels must divide into groups"));
    }
    let b = x.dim(0);
    let c = x.dim(1);
    let spatial = x.len() / (b * c);
    Ok((b, c, spatial))
}

pub fn group_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, groups: usize) -> Result<(Tensor<T>, GnStats)> {
    let (b, c, sp) = gn_dims(x, groups)?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("group_norm affine", &[c], gamma.shape()));
    }
    let cg = c / groups;
    let n = (cg * sp) as f64;
    let mut y = Tensor::zeros(x.shape());
    let mut stats = GnStats {
        mean: Vec::with_capacity(b * groups),
        rstd: Vec::with_capacity(b * groups),
    };
    for s in 0..b {
        for gi in 0..groups {
            let start = (s * c + gi * cg) * sp;
            let seg = &x.data()[start..start + cg * sp];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / libm::sqrt(var + GN_EPS);
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            let (m, r) = (T::of(mean), T::of(rstd));
            let out = &mut y.data_mut()[start..start + cg * sp];
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in 0..sp {
                    let k = ci * sp + j;
                    out[k] = (seg[k] - m) * r * ga + be;
                }
            }
        }
    }
    Ok((y, stats))
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GnStats,
    dy: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, sp) = gn_dims(x, groups)?;
    let cg = c / groups;
    let n = (cg * sp) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..b {
        for gi in 0..groups {
            let idx = s * groups + gi;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let start = (s * c + gi * cg) * sp;
            let xs = &x.data()[start..start + cg * sp];
            let dys = &dy.data()[start..start + cg * sp];
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma.data()[ch].as_f64();
                for j in 0..sp {
                    let k = ci * sp + j;
                    let xhat = (xs[k].as_f64() - mean) * rstd;
                    let d = dys[k].as_f64();
                    dgamma[ch] += d * xhat;
                    dbeta[ch] += d;
                    sum_d += d * ga;
                    sum_dx += d * ga * xhat;
                }
            }
            let (md, mdx) = (sum_d / n, sum_dx / n);
            let out = &mut dx.data_mut()[start..start + cg * sp];
            for ci in 0..cg {
                let ga = gamma.data()[gi * cg + ci].as_f64();
                for j in 0..sp {
                    let k = ci * sp + j;
                    let xhat = (xs[k].as_f64() - mean) * rstd;
                    out[k] = T::of(rstd * (dys[k].as_f64() * ga - md - xhat * mdx));
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_fn(&[c], |i| T::of(v[i]));
    Ok((dx, to_t(dgamma), to_t(dbeta)))
}

/// In-place softmax over consecutive rows of length `n`.
pub fn softmax_rows<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(dyr) {
            dot += a * b;
        }
        for ((d, &a), &b) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = a * (b - dot);
        }
    }
    dx
}

/// Softmax along `axis` of an arbitrary tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid("softmax", "axis out of range"));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    if inner == 1 {
        let mut y = x.clone();
        softmax_rows(y.data_mut(), n);
        return Ok(y);
    }
    let mut y = x.clone();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = x.data()[(o * n + j) * inner + i];
            }
            softmax_rows(&mut buf, n);
            for j in 0..n {
                y.data_mut()[(o * n + j) * inner + i] = buf[j];
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    if inner == 1 {
        let d = softmax_rows_backward(y.data(), dy.data(), n);
        return Tensor::new(y.shape(), d).expect("shape preserved");
    }
    let mut dx = Tensor::zeros(y.shape());
    let (mut yb, mut db) = (vec![T::zero(); n], vec![T::zero(); n]);
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                yb[j] = y.data()[(o * n + j) * inner + i];
                db[j] = dy.data()[(o * n + j) * inner + i];
            }
            let d = softmax_rows_backward(&yb, &db, n);
            for j in 0..n {
                dx.data_mut()[(o * n + j) * inner + i] = d[j];
            }
        }
    }
    dx
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Shapes of a grouped attention call: `groups` independent problems with
/// `lq` queries, `lk` keys, key width `d` and value width `dv`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub groups: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
}

impl AttnDims {
    /// Multiply-accumulates spent in `Q·Kᵀ` and `P·V`.
    pub fn macs(&self) -> u64 {
        (self.groups * self.lq * self.lk * (self.d + self.dv)) as u64
    }
}

/// Interprets `q`, `k`, `v` as `[groups, L, width]` over their flat data.
pub fn attention_dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, groups: usize) -> Result<AttnDims> {
    let d = *q.shape().last().unwrap_or(&0);
    let dk = *k.shape().last().unwrap_or(&0);
    let dv = *v.shape().last().unwrap_or(&0);
    if d != dk || d == 0 || groups == 0 {
        return Err(shape_err("attention", q.shape(), k.shape()));
    }
    let rows = |t: &Tensor<T>, w: usize| t.len() / w;
    let (rq, rk, rv) = (rows(q, d), rows(k, d), rows(v, dv));
    if rq % groups != 0 || rk % groups != 0 || rk != rv {
        return Err(shape_err("attention", k.shape(), v.shape()));
    }
    Ok(AttnDims {
        groups,
        lq: rq / groups,
        lk: rk / groups,
        d,
        dv,
    })
}

/// `softmax(q·kᵀ/√d)·v` per group. Returns the output and the attention
/// probabilities `[groups, lq, lk]`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims { groups, lq, lk, d, dv } = dims;
    let scale = T::of(1.0 / libm::sqrt(d as f64));
    let mut probs = vec![T::zero(); groups * lq * lk];
    let mut out = vec![T::zero(); groups * lq * dv];
    for g in 0..groups {
        let p = &mut probs[g * lq * lk..(g + 1) * lq * lk];
        gemm(lq, d, lk, scale, q.data(), MatView::rows(g * lq * d, d), k.data(), MatView::transposed(g * lk * d, d), T::zero(), p, MatView::rows(0, lk));
        softmax_rows(p, lk);
        gemm(lq, lk, dv, T::one(), p, MatView::rows(0, lk), v.data(), MatView::rows(g * lk * dv, dv), T::zero(), &mut out, MatView::rows(g * lq * dv, dv));
    }
    (out, probs)
}

/// Vector-Jacobian product of [`attention`]; returns `(dq, dk, dv)` as flat data.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { groups, lq, lk, d, dv } = dims;
    let scale = T::of(1.0 / libm::sqrt(d as f64));
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dvv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); lq * lk];
    for g in 0..groups {
        let p = &probs[g * lq * lk..(g + 1) * lq * lk];
        // dP = dO·Vᵀ
        gemm(lq, dv, lk, T::one(), dout, MatView::rows(g * lq * dv, dv), v.data(), MatView::transposed(g * lk * dv, dv), T::zero(), &mut dp, MatView::rows(0, lk));
        // dV = Pᵀ·dO
        gemm(lk, lq, dv, T::one(), p, MatView::transposed(0, lk), dout, MatView::rows(g * lq * dv, dv), T::zero(), &mut dvv, MatView::rows(g * lk * dv, dv));
        let ds = softmax_rows_backward(p, &dp, lk);
        // dQ = dS·K·scale, dK = dSᵀ·Q·scale
        gemm(lq, lk, d, scale, &ds, MatView::rows(0, lk), k.data(), MatView::rows(g * lk * d, d), T::zero(), &mut dq, MatView::rows(g * lq * d, d));
        gemm(lk, lq, d, scale, &ds, MatView::transposed(0, lk), q.data(), MatView::rows(g * lq * d, d), T::zero(), &mut dk, MatView::rows(g * lk * d, d));
    }
    (dq, dk, dvv)
}

/// `[B,C,H,W] → [B,HW,C]`.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, hw, c]);
    for s in 0..b {
        let src = &x.data()[s * c * hw..(s + 1) * c * hw];
        let dst = &mut out.data_mut()[s * c * hw..(s + 1) * c * hw];
        for ci in 0..c {
            for j in 0..hw {
                dst[j * c + ci] = src[ci * hw + j];
            }
        }
    }
    out
}

/// `[B,HW,C] → [B,C,H,W]`.
pub fn from_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, hw, c) = (x.dim(0), x.dim(1), x.dim(2));
    debug_assert_eq!(hw, h * w);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for s in 0..b {
        let src = &x.data()[s * c * hw..(s + 1) * c * hw];
        let dst = &mut out.data_mut()[s * c * hw..(s + 1) * c * hw];
        for j in 0..hw {
            for ci in 0..c {
                dst[ci * hw + j] = src[j * c + ci];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (b, c, h2, w2) = (dy.dim(0), dy.dim(1), dy.dim(2), dy.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    for (src, dst) in dy.data().chunks(h2 * w2).zip(dx.data_mut().chunks_mut(h * w)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// `[B,C,H,W] → [B,4C,H/2,W/2]`; output channel `c·4 + dy·2 + dx`.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(invalid("space_to_depth", "expected [B,C,H,W]"));
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("space_to_depth", "spatial size must be even"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, 4 * c, ho, wo]);
    let od = out.data_mut();
    for s in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * 4 + (y % 2) * 2 + xx % 2;
                    od[((s * 4 * c + oc) * ho + y / 2) * wo + xx / 2] = x.data()[((s * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(invalid("depth_to_space", "expected [B,C,H,W]"));
    }
    let (b, c4, ho, wo) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if c4 % 4 != 0 {
        return Err(invalid("depth_to_space", "channels must be a multiple of 4"));
    }
    let (c, h, w) = (c4 / 4, ho * 2, wo * 2);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let od = out.data_mut();
    for s in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * 4 + (y % 2) * 2 + xx % 2;
                    od[((s * c + ci) * h + y) * w + xx] = x.data()[((s * 4 * c + oc) * ho + y / 2) * wo + xx / 2];
                }
            }
        }
    }
    Ok(out)
}
