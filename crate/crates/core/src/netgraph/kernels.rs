//! NHWC kernels shared by inference, training and the quantized executor.
//!
//! Everything is generic over [`Real`] so the finite-difference checks can run
//! the exact same code in f64. Row blocking uses a fixed block size, so the
//! summation order of every output element is independent of how many worker
//! threads execute the blocks.

use std::borrow::Cow;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rayon::prelude::*;

/// Output rows per im2col block.
pub const ROW_BLOCK: usize = 256;

pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn cast_slice(v: &[f32]) -> Cow<'_, [Self]>;

    /// `C = A B + beta C` with arbitrary strides.
    ///
    /// # Safety
    /// Every index addressed through the strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn cast_slice(v: &[f32]) -> Cow<'_, [Self]> {
        Cow::Borrowed(v)
    }
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn cast_slice(v: &[f32]) -> Cow<'_, [Self]> {
        Cow::Owned(v.iter().map(|&x| x as f64).collect())
    }
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// Bounds-checked `C[m x n] = A[m x k] B[k x n] + beta C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == T::ZERO { T::ZERO } else { *v * beta };
            }
        }
        return;
    }
    assert!(max_index(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(max_index(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    // SAFETY: all three operands were bounds-checked above.
    unsafe {
        T::gemm_unchecked(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Batch of feature maps, NHWC.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::ZERO; n * h * w * c],
        }
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }
}

/// Kernel-side view of a conv layer with weights already cast to `T`.
pub struct ConvView<'a, T: Clone> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    /// `out_ch x kh x kw x in_ch`.
    pub weight: Cow<'a, [T]>,
    pub bias: Cow<'a, [T]>,
}

fn im2col<T: Real>(x: &FeatureMap<T>, kh: usize, kw: usize, p0: usize, rows: usize, col: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let ic = x.c;
    let k = kh * kw * ic;
    for r in 0..rows {
        let p = p0 + r;
        let b = p / (x.h * x.w);
        let y = (p / x.w) % x.h;
        let xx = p % x.w;
        let dst = &mut col[r * k..(r + 1) * k];
        for ky in 0..kh {
            let yy = y as isize + ky as isize - ph as isize;
            for kx in 0..kw {
                let xs = xx as isize + kx as isize - pw as isize;
                let d = &mut dst[(ky * kw + kx) * ic..(ky * kw + kx + 1) * ic];
                if yy < 0 || yy >= x.h as isize || xs < 0 || xs >= x.w as isize {
                    d.fill(T::ZERO);
                } else {
                    let off = ((b * x.h + yy as usize) * x.w + xs as usize) * ic;
                    d.copy_from_slice(&x.data[off..off + ic]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(dx: &mut FeatureMap<T>, kh: usize, kw: usize, p0: usize, rows: usize, col: &[T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let ic = dx.c;
    let k = kh * kw * ic;
    for r in 0..rows {
        let p = p0 + r;
        let b = p / (dx.h * dx.w);
        let y = (p / dx.w) % dx.h;
        let xx = p % dx.w;
        let src = &col[r * k..(r + 1) * k];
        for ky in 0..kh {
            let yy = y as isize + ky as isize - ph as isize;
            if yy < 0 || yy >= dx.h as isize {
                continue;
            }
            for kx in 0..kw {
                let xs = xx as isize + kx as isize - pw as isize;
                if xs < 0 || xs >= dx.w as isize {
                    continue;
                }
                let off = ((b * dx.h + yy as usize) * dx.w + xs as usize) * ic;
                let s = &src[(ky * kw + kx) * ic..(ky * kw + kx + 1) * ic];
                for (d, &v) in dx.data[off..off + ic].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding (odd kernels).
pub fn conv2d<T: Real>(x: &FeatureMap<T>, p: &ConvView<'_, T>) -> FeatureMap<T> {
    debug_assert_eq!(x.c, p.in_ch);
    let o = p.out_ch;
    let k = p.kh * p.kw * p.in_ch;
    let mut out = FeatureMap::zeros(x.n, x.h, x.w, o);
    if p.kh == 1 && p.kw == 1 {
        out.data
            .par_chunks_mut(ROW_BLOCK * o)
            .enumerate()
            .for_each(|(blk, dst)| {
                let rows = dst.len() / o;
                let src = &x.data[blk * ROW_BLOCK * k..(blk * ROW_BLOCK + rows) * k];
                gemm(rows, k, o, src, (k, 1), &p.weight, (1, k), T::ZERO, dst, (o, 1));
            });
    } else {
        out.data
            .par_chunks_mut(ROW_BLOCK * o)
            .enumerate()
            .for_each(|(blk, dst)| {
                let rows = dst.len() / o;
                let mut col = vec![T::ZERO; rows * k];
                im2col(x, p.kh, p.kw, blk * ROW_BLOCK, rows, &mut col);
                gemm(rows, k, o, &col, (k, 1), &p.weight, (1, k), T::ZERO, dst, (o, 1));
            });
    }
    add_bias(&mut out, &p.bias);
    out
}

fn add_bias<T: Real>(out: &mut FeatureMap<T>, bias: &[T]) {
    for px in out.data.chunks_exact_mut(out.c) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub struct ConvGrads<T> {
    pub dx: FeatureMap<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// `dx` is left empty (zero-sized) unless `need_dx`.
pub fn conv2d_backward<T: Real>(x: &FeatureMap<T>, p: &ConvView<'_, T>, dy: &FeatureMap<T>, need_dx: bool) -> ConvGrads<T> {
    let o = p.out_ch;
    let k = p.kh * p.kw * p.in_ch;
    let mut dx = if need_dx {
        FeatureMap::zeros(x.n, x.h, x.w, x.c)
    } else {
        FeatureMap::zeros(0, x.h, x.w, x.c)
    };
    let mut dw = vec![T::ZERO; o * k];
    let db = channel_sums(dy);
    let total = x.pixels();
    let mut col = vec![T::ZERO; ROW_BLOCK * k];
    let mut dcol = vec![T::ZERO; if need_dx { ROW_BLOCK * k } else { 0 }];
    let mut p0 = 0;
    while p0 < total {
        let rows = ROW_BLOCK.min(total - p0);
        let dyb = &dy.data[p0 * o..(p0 + rows) * o];
        if p.kh == 1 && p.kw == 1 {
            let xb = &x.data[p0 * k..(p0 + rows) * k];
            gemm(o, rows, k, dyb, (1, o), xb, (k, 1), T::ONE, &mut dw, (k, 1));
            if need_dx {
                gemm(rows, o, k, dyb, (o, 1), &p.weight, (k, 1), T::ZERO, &mut dx.data[p0 * k..(p0 + rows) * k], (k, 1));
            }
        } else {
            im2col(x, p.kh, p.kw, p0, rows, &mut col);
            gemm(o, rows, k, dyb, (1, o), &col, (k, 1), T::ONE, &mut dw, (k, 1));
            if need_dx {
                gemm(rows, o, k, dyb, (o, 1), &p.weight, (k, 1), T::ZERO, &mut dcol, (k, 1));
                col2im_add(&mut dx, p.kh, p.kw, p0, rows, &dcol);
            }
        }
        p0 += rows;
    }
    ConvGrads { dx, dw, db }
}

fn channel_sums<T: Real>(y: &FeatureMap<T>) -> Vec<T> {
    let mut s = vec![T::ZERO; y.c];
    for px in y.data.chunks_exact(y.c) {
        for (a, &v) in s.iter_mut().zip(px) {
            *a += v;
        }
    }
    s
}

/// 2x2, stride-2 transposed convolution:
/// `out(2i+a, 2j+b, o) = bias[o] + sum_c x(i, j, c) w[o, a, b, c]`.
pub fn conv_transpose2d<T: Real>(x: &FeatureMap<T>, p: &ConvView<'_, T>) -> FeatureMap<T> {
    let (o, ic) = (p.out_ch, p.in_ch);
    let cols = 4 * o;
    let total = x.pixels();
    let mut z = vec![T::ZERO; total * cols];
    z.par_chunks_mut(ROW_BLOCK * cols).enumerate().for_each(|(blk, dst)| {
        let rows = dst.len() / cols;
        let src = &x.data[blk * ROW_BLOCK * ic..(blk * ROW_BLOCK + rows) * ic];
        gemm(rows, ic, cols, src, (ic, 1), &p.weight, (1, ic), T::ZERO, dst, (cols, 1));
    });
    let mut out = FeatureMap::zeros(x.n, 2 * x.h, 2 * x.w, o);
    for pix in 0..total {
        let b = pix / (x.h * x.w);
        let i = (pix / x.w) % x.h;
        let j = pix % x.w;
        for a in 0..2 {
            for bb in 0..2 {
                let off = ((b * out.h + 2 * i + a) * out.w + 2 * j + bb) * o;
                for oc in 0..o {
                    out.data[off + oc] = z[pix * cols + oc * 4 + a * 2 + bb] + p.bias[oc];
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(x: &FeatureMap<T>, p: &ConvView<'_, T>, dy: &FeatureMap<T>) -> ConvGrads<T> {
    let (o, ic) = (p.out_ch, p.in_ch);
    let cols = 4 * o;
    let total = x.pixels();
    let mut dz = vec![T::ZERO; total * cols];
    for pix in 0..total {
        let b = pix / (x.h * x.w);
        let i = (pix / x.w) % x.h;
        let j = pix % x.w;
        for a in 0..2 {
            for bb in 0..2 {
                let off = ((b * dy.h + 2 * i + a) * dy.w + 2 * j + bb) * o;
                for oc in 0..o {
                    dz[pix * cols + oc * 4 + a * 2 + bb] = dy.data[off + oc];
                }
            }
        }
    }
    let mut dx = FeatureMap::zeros(x.n, x.h, x.w, ic);
    gemm(total, cols, ic, &dz, (cols, 1), &p.weight, (ic, 1), T::ZERO, &mut dx.data, (ic, 1));
    let mut dw = vec![T::ZERO; cols * ic];
    gemm(cols, total, ic, &dz, (1, cols), &x.data, (ic, 1), T::ZERO, &mut dw, (ic, 1));
    ConvGrads {
        dx,
        dw,
        db: channel_sums(dy),
    }
}

/// Per-channel affine map `y = x * scale[c] + shift[c]`.
pub fn channel_affine<T: Real>(x: &FeatureMap<T>, scale: &[T], shift: &[T]) -> FeatureMap<T> {
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(x.c) {
        for ((v, &s), &b) in px.iter_mut().zip(scale).zip(shift) {
            *v = *v * s + b;
        }
    }
    out
}

/// Inference-mode batch norm coefficients `(scale, shift)`.
pub fn bn_coefficients<T: Real>(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> (Vec<T>, Vec<T>) {
    let scale: Vec<T> = gamma
        .iter()
        .zip(var)
        .map(|(&g, &v)| T::from_f32(g) / (T::from_f32(v) + T::from_f32(eps)).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| T::from_f32(b) - T::from_f32(m) * s)
        .collect();
    (scale, shift)
}

/// Training-mode batch norm state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batch_norm_train<T: Real>(x: &FeatureMap<T>, gamma: &[T], beta: &[T], eps: f32) -> (FeatureMap<T>, BnCache<T>) {
    let c = x.c;
    let m = x.pixels() as f64;
    let mut mean = vec![0.0f64; c];
    for px in x.data.chunks_exact(c) {
        for (a, &v) in mean.iter_mut().zip(px) {
            *a += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for px in x.data.chunks_exact(c) {
        for ((a, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v.to_f64() - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps as f64).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
    let mut xhat = x.data.clone();
    let mut out = x.clone();
    for (hx, o) in xhat.chunks_exact_mut(c).zip(out.data.chunks_exact_mut(c)) {
        for ch in 0..c {
            hx[ch] = (hx[ch] - mean_t[ch]) * inv_std[ch];
            o[ch] = gamma[ch] * hx[ch] + beta[ch];
        }
    }
    (out, BnCache { xhat, inv_std, mean, var })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(dy: &FeatureMap<T>, gamma: &[T], cache: &BnCache<T>) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let c = dy.c;
    let m = T::from_f64(dy.pixels() as f64);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for (g, hx) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += g[ch] * hx[ch];
            dbeta[ch] += g[ch];
        }
    }
    let mut dx = dy.clone();
    for (d, hx) in dx.data.chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            d[ch] = k * (m * d[ch] - dbeta[ch] - hx[ch] * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    });
    out
}

/// Gradient through ReLU given its output; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(y: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if !(v > T::ZERO) {
            *d = T::ZERO;
        }
    }
    dx
}

/// 2x2 stride-2 max pooling; also returns the winning quadrant (first max).
pub fn max_pool<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u8>) {
    let (oh, ow, c) = (x.h / 2, x.w / 2, x.c);
    let mut out = FeatureMap::zeros(x.n, oh, ow, c);
    let mut arg = vec![0u8; out.data.len()];
    for b in 0..x.n {
        for i in 0..oh {
            for j in 0..ow {
                let dst = ((b * oh + i) * ow + j) * c;
                for q in 0..4usize {
                    let src = ((b * x.h + 2 * i + q / 2) * x.w + 2 * j + q % 2) * c;
                    for ch in 0..c {
                        let v = x.data[src + ch];
                        if q == 0 || v > out.data[dst + ch] {
                            out.data[dst + ch] = v;
                            arg[dst + ch] = q as u8;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Real>(dy: &FeatureMap<T>, arg: &[u8], in_h: usize, in_w: usize) -> FeatureMap<T> {
    let c = dy.c;
    let mut dx = FeatureMap::zeros(dy.n, in_h, in_w, c);
    for b in 0..dy.n {
        for i in 0..dy.h {
            for j in 0..dy.w {
                let src = ((b * dy.h + i) * dy.w + j) * c;
                for ch in 0..c {
                    let q = arg[src + ch] as usize;
                    let dst = ((b * in_h + 2 * i + q / 2) * in_w + 2 * j + q % 2) * c;
                    dx.data[dst + ch] += dy.data[src + ch];
                }
            }
        }
    }
    dx
}

pub fn concat<T: Real>(parts: &[&FeatureMap<T>]) -> FeatureMap<T> {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = FeatureMap::zeros(n, h, w, c);
    for (pix, dst) in out.data.chunks_exact_mut(c).enumerate() {
        let mut off = 0;
        for p in parts {
            dst[off..off + p.c].copy_from_slice(&p.data[pix * p.c..(pix + 1) * p.c]);
            off += p.c;
        }
    }
    out
}

pub fn concat_backward<T: Real>(dy: &FeatureMap<T>, widths: &[usize]) -> Vec<FeatureMap<T>> {
    let mut off = 0;
    widths
        .iter()
        .map(|&c| {
            let mut part = FeatureMap::zeros(dy.n, dy.h, dy.w, c);
            for (pix, dst) in part.data.chunks_exact_mut(c).enumerate() {
                dst.copy_from_slice(&dy.data[pix * dy.c + off..pix * dy.c + off + c]);
            }
            off += c;
            part
        })
        .collect()
}

pub fn softmax<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(x.c) {
        let mx = px.iter().copied().fold(px[0], |a, b| if b > a { b } else { a });
        let mut sum = T::ZERO;
        for v in px.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Mean pixelwise cross-entropy from logits and its gradient w.r.t. the
/// logits. Pixels labelled `classes` are ignored. Returns `None` when every
/// pixel is ignored.
pub fn cross_entropy<T: Real>(logits: &FeatureMap<T>, labels: &[u8]) -> Option<(f64, FeatureMap<T>)> {
    let k = logits.c;
    let valid = labels.iter().filter(|&&l| (l as usize) < k).count();
    if valid == 0 {
        return None;
    }
    let probs = softmax(logits);
    let mut grad = FeatureMap::zeros(logits.n, logits.h, logits.w, k);
    let inv = T::from_f64(1.0 / valid as f64);
    let mut loss = 0.0f64;
    for (pix, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            continue;
        }
        let z = &logits.data[pix * k..(pix + 1) * k];
        let mx = z.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln();
        loss += lse - z[l].to_f64();
        let g = &mut grad.data[pix * k..(pix + 1) * k];
        for (c, gv) in g.iter_mut().enumerate() {
            let p = probs.data[pix * k + c];
            *gv = (if c == l { p - T::ONE } else { p }) * inv;
        }
    }
    Some((loss / valid as f64, grad))
}
