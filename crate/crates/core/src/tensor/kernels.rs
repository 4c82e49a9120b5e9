//! Forward and backward kernels. Every function here is pure: it reads its
//! inputs and returns fresh tensors. The tape in [`super::tape`] records which
//! kernel produced each value and calls the matching `*_backward` on reversal.

use super::{Scalar, Tensor};
use crate::error::{dim_err, shape_err, Error, Result};
use crate::par;

// ---------------------------------------------------------------- helpers

/// Normalized coordinate of index `i` on an axis of `n` samples: `-1` at the
/// first sample, `+1` at the last. A single-sample axis maps to `0`.
#[inline]
pub fn normalized_coord<T: Scalar>(i: usize, n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        // evaluated in f64 and rounded once
        T::lit(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
    }
}

/// Align-corners inverse of [`normalized_coord`]: normalized `c` to a
/// (fractional) pixel position on an axis of `n` samples.
#[inline]
pub fn pixel_position<T: Scalar>(c: T, n: usize) -> T {
    (c + T::one()) / T::lit(2.0) * T::lit((n.max(1) - 1) as f64)
}

/// Dot product with eight independent accumulators so the loop vectorizes
/// while the summation order stays fixed.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let a8 = &a[c * 8..c * 8 + 8];
        let b8 = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn require_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return shape_err(op, t.shape(), format!("rank {rank}"));
    }
    Ok(())
}

// ----------------------------------------------------------------- matmul

/// `c[m×n] = a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if n < 16 && k >= 32 {
        // narrow output: row axpys would be too short to vectorize
        return gemm_dots(a, &transpose_raw(b, k, n), m, k, n);
    }
    let mut c = vec![T::zero(); m * n];
    par::for_each_row(&mut c, n, k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    });
    c
}

/// `c[m×n] = aᵀ · b` with `a[k×m]`, `b[k×n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    if n < 16 && k >= 32 {
        return gemm_dots(&transpose_raw(a, k, m), &transpose_raw(b, k, n), m, k, n);
    }
    let mut c = vec![T::zero(); m * n];
    par::for_each_row(&mut c, n, k * n, |i, row| {
        for p in 0..k {
            let api = a[p * m + i];
            if api != T::zero() {
                axpy(api, &b[p * n..(p + 1) * n], row);
            }
        }
    });
    c
}

/// `c[m×n] = a · bᵀ` with `a[m×k]`, `b[n×k]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if k >= 32 {
        gemm_dots(a, b, m, k, n)
    } else {
        // short inner dimension: transpose once and stream rows instead
        let bt = transpose_raw(b, n, k);
        gemm_nn(a, &bt, m, k, n)
    }
}

/// `c[i][j] = a_row_i · b_row_j` with `a[m×k]`, `b[n×k]`.
fn gemm_dots<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    par::for_each_row(&mut c, n, k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

pub(crate) fn transpose_raw<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn matrix_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    require_rank(op, t, 2)?;
    Ok((t.dim(0), t.dim(1)))
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return dim_err("matmul", a.shape(), b.shape());
    }
    Tensor::new(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul_bt", a)?;
    let (n, k2) = matrix_dims("matmul_bt", b)?;
    if k != k2 {
        return dim_err("matmul_bt", a.shape(), b.shape());
    }
    Tensor::new(vec![m, n], gemm_nt(a.data(), b.data(), m, k, n))
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = matrix_dims("matmul_at", a)?;
    let (k2, n) = matrix_dims("matmul_at", b)?;
    if k != k2 {
        return dim_err("matmul_at", a.shape(), b.shape());
    }
    Tensor::new(vec![m, n], gemm_tn(a.data(), b.data(), k, m, n))
}

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims("transpose", x)?;
    Tensor::new(vec![c, r], transpose_raw(x.data(), r, c))
}

// ---------------------------------------------------------------- softmax

/// Temperature-scaled softmax over the last axis, stabilized by subtracting
/// the row maximum.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive and finite, got {temperature:?}"
        )));
    }
    let n = *x.shape().last().ok_or_else(|| Error::Shape {
        op: "softmax",
        shape: vec![],
        expected: "rank >= 1".into(),
    })?;
    let inv_t = T::one() / temperature;
    let mut out = x.data().to_vec();
    par::for_each_row(&mut out, n, 4 * n, |_, row| {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - mx) * inv_t).exp();
            s += *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of [`softmax_lastdim`] given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, temperature: T) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let inv_t = T::one() / temperature;
    let mut dx = vec![T::zero(); y.len()];
    par::for_each_row(&mut dx, n, 3 * n, |r, row| {
        let yr = &y.data()[r * n..(r + 1) * n];
        let gr = &dy.data()[r * n..(r + 1) * n];
        let s = dot(yr, gr);
        for ((o, &yi), &gi) in row.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - s) * inv_t;
        }
    });
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

// ------------------------------------------------------------------ conv2d

fn conv_dims<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    require_rank("conv2d", x, 3)?;
    require_rank("conv2d", kernel, 4)?;
    if kernel.dim(2) != 3 || kernel.dim(3) != 3 {
        return shape_err("conv2d", kernel.shape(), "a 3×3 kernel [c_out, c_in, 3, 3]");
    }
    if kernel.dim(1) != x.dim(0) {
        return dim_err("conv2d", x.shape(), kernel.shape());
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), kernel.dim(0)))
}

/// Unfolds `x[c×h×w]` into `[(c·9) × (h·w)]` patches with zero padding 1.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    par::for_each_row(&mut cols, hw, hw, |r, row| {
        let ci = r / 9;
        let ky = (r % 9) / 3;
        let kx = r % 3;
        let plane = &x[ci * hw..(ci + 1) * hw];
        for y in 0..h {
            let sy = y as isize + ky as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src = &plane[sy as usize * w..(sy as usize + 1) * w];
            let dst = &mut row[y * w..(y + 1) * w];
            for xo in 0..w {
                let sx = xo as isize + kx as isize - 1;
                if sx >= 0 && sx < w as isize {
                    dst[xo] = src[sx as usize];
                }
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    par::for_each_row(&mut x, hw, 9 * hw, |ci, plane| {
        for k in 0..9 {
            let ky = k / 3;
            let kx = k % 3;
            let row = &cols[(ci * 9 + k) * hw..(ci * 9 + k + 1) * hw];
            for y in 0..h {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let src = &row[y * w..(y + 1) * w];
                let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                for xo in 0..w {
                    let sx = xo as isize + kx as isize - 1;
                    if sx >= 0 && sx < w as isize {
                        dst[sx as usize] += src[xo];
                    }
                }
            }
        }
    });
    x
}

/// 3×3 cross-correlation, zero padding 1, stride 1. Returns the output and
/// the unfolded input, which the backward pass reuses.
pub(crate) fn conv2d_with_cols<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (cin, h, w, cout) = conv_dims(x, kernel)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return dim_err("conv2d bias", b.shape(), &[cout]);
        }
    }
    let hw = h * w;
    let cols = im2col(x.data(), cin, h, w);
    let mut out = gemm_nn(kernel.data(), &cols, cout, cin * 9, hw);
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(hw).zip(b.data()) {
            o.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok((Tensor::new(vec![cout, h, w], out)?, cols))
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    conv2d_with_cols(x, kernel, bias).map(|(y, _)| y)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dkernel: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    cols: &[T],
    x_shape: &[usize],
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let cout = kernel.dim(0);
    let hw = h * w;
    let dkernel = gemm_nt(dy.data(), cols, cout, hw, cin * 9);
    let dbias: Vec<T> = dy.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
    let dx = need_dx.then(|| {
        let dcols = gemm_tn(kernel.data(), dy.data(), cout, cin * 9, hw);
        Tensor::new(vec![cin, h, w], col2im(&dcols, cin, h, w)).expect("shape")
    });
    ConvGrads {
        dx,
        dkernel: Tensor::new(kernel.shape().to_vec(), dkernel).expect("shape"),
        dbias: Tensor::new(vec![cout], dbias).expect("shape"),
    }
}

// --------------------------------------------------------- bilinear resize

/// Source index pair and interpolation weight of the upper neighbour.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn resize_taps<T: Scalar>(out: usize, inp: usize) -> Vec<Tap<T>> {
    (0..out)
        .map(|o| {
            if inp == 1 {
                return Tap { lo: 0, hi: 0, frac: T::zero() };
            }
            let p = if out == 1 {
                T::lit((inp - 1) as f64) / T::lit(2.0)
            } else {
                T::lit((o * (inp - 1)) as f64) / T::lit((out - 1) as f64)
            };
            let lo = (p.floor().to_f64() as usize).min(inp - 2);
            Tap { lo, hi: lo + 1, frac: p - T::lit(lo as f64) }
        })
        .collect()
}

/// `a + (b - a)·f`, returning `a` and `b` themselves at `f = 0` and `f = 1`
/// and `a` when `a == b`.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: T) -> T {
    if f == T::one() {
        b
    } else {
        a + (b - a) * f
    }
}

/// Align-corners bilinear resize of `x[c×h×w]` to `[c×out_h×out_w]`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    require_rank("bilinear_resize", x, 3)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!(
            "bilinear_resize target must be at least 1×1, got {out_h}×{out_w}"
        )));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ty = resize_taps::<T>(out_h, h);
    let tx = resize_taps::<T>(out_w, w);
    let mut out = vec![T::zero(); c * out_h * out_w];
    par::for_each_row(&mut out, out_h * out_w, 8 * out_h * out_w, |ci, plane| {
        let src = &x.data()[ci * h * w..(ci + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let fy = ry.frac;
            for (ox, rx) in tx.iter().enumerate() {
                let fx = rx.frac;
                let top = lerp(src[ry.lo * w + rx.lo], src[ry.lo * w + rx.hi], fx);
                let bot = lerp(src[ry.hi * w + rx.lo], src[ry.hi * w + rx.hi], fx);
                plane[oy * out_w + ox] = lerp(top, bot, fy);
            }
        }
    });
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let (c, out_h, out_w) = (dy.dim(0), dy.dim(1), dy.dim(2));
    if in_h == out_h && in_w == out_w {
        return dy.clone();
    }
    let ty = resize_taps::<T>(out_h, in_h);
    let tx = resize_taps::<T>(out_w, in_w);
    let mut dx = vec![T::zero(); c * in_h * in_w];
    par::for_each_row(&mut dx, in_h * in_w, 8 * out_h * out_w, |ci, plane| {
        let g = &dy.data()[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let fy = ry.frac;
            for (ox, rx) in tx.iter().enumerate() {
                let fx = rx.frac;
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                plane[ry.lo * in_w + rx.lo] += top * (T::one() - fx);
                plane[ry.lo * in_w + rx.hi] += top * fx;
                plane[ry.hi * in_w + rx.lo] += bot * (T::one() - fx);
                plane[ry.hi * in_w + rx.hi] += bot * fx;
            }
        }
    });
    Tensor::new(vec![c, in_h, in_w], dx).expect("shape")
}

// ------------------------------------------------------------- avg pool 2

/// 2×2 average pooling with stride 2 over `x[c×h×w]`, `h` and `w` even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank("avg_pool2", x, 3)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("avg_pool2", x.shape(), "even spatial dimensions");
    }
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let src = &x.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let a = src[2 * y * w + 2 * xo] + src[2 * y * w + 2 * xo + 1];
                let b = src[(2 * y + 1) * w + 2 * xo] + src[(2 * y + 1) * w + 2 * xo + 1];
                dst[y * ow + xo] = (a + b) * q;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = (dy.dim(0), dy.dim(1), dy.dim(2));
    let (h, w) = (oh * 2, ow * 2);
    let q = T::lit(0.25);
    Tensor::from_fn(vec![c, h, w], |i| {
        let ci = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        dy.data()[ci * oh * ow + (y / 2) * ow + x / 2] * q
    })
}

// -------------------------------------------------------------------- silu

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, "silu", |v, g| {
        let s = sigmoid(v);
        g * (s + v * s * (T::one() - s))
    })
    .expect("same shape")
}

// ------------------------------------------------------------ row normalize

/// Divides every row of `x[m×n]` by `(row_sum + eps)`.
pub fn row_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, n) = matrix_dims("row_normalize", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let s: T = row.iter().copied().sum::<T>() + eps;
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn row_normalize_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, eps: T) -> Tensor<T> {
    let n = x.dim(1);
    let mut dx = vec![T::zero(); x.len()];
    for (r, row) in dx.chunks_mut(n).enumerate() {
        let xr = &x.data()[r * n..(r + 1) * n];
        let gr = &dy.data()[r * n..(r + 1) * n];
        let s: T = xr.iter().copied().sum::<T>() + eps;
        let proj = dot(xr, gr) / (s * s);
        for (o, &g) in row.iter_mut().zip(gr) {
            *o = g / s - proj;
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape")
}

// --------------------------------------------------------- row standardize

/// Shifts and scales every row of `x[m×n]` to zero mean and unit variance,
/// `(x - mean) / sqrt(var + eps)`.
pub fn row_standardize<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, n) = matrix_dims("row_standardize", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let (mean, inv) = row_moments(row, eps);
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub fn row_standardize_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, eps: T) -> Tensor<T> {
    let n = x.dim(1);
    let nt = T::lit(n as f64);
    let mut dx = vec![T::zero(); x.len()];
    for (r, row) in dx.chunks_mut(n).enumerate() {
        let xr = &x.data()[r * n..(r + 1) * n];
        let gr = &dy.data()[r * n..(r + 1) * n];
        let (mean, inv) = row_moments(xr, eps);
        let g_mean = gr.iter().copied().sum::<T>() / nt;
        let gy_mean = xr.iter().zip(gr).map(|(&v, &g)| (v - mean) * inv * g).sum::<T>() / nt;
        for ((o, &v), &g) in row.iter_mut().zip(xr).zip(gr) {
            *o = inv * (g - g_mean - (v - mean) * inv * gy_mean);
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape")
}

// ------------------------------------------------------------- grid sample

/// Sampling position on one axis: neighbour indices, upper weight, and
/// d(position)/d(normalized coordinate) (zero when clamped).
#[derive(Clone, Copy, Debug)]
struct AxisSample<T> {
    lo: usize,
    hi: usize,
    frac: T,
    slope: T,
}

#[inline]
fn axis_sample<T: Scalar>(c: T, n: usize) -> AxisSample<T> {
    if n <= 1 {
        return AxisSample { lo: 0, hi: 0, frac: T::zero(), slope: T::zero() };
    }
    let last = T::lit((n - 1) as f64);
    let mut p = pixel_position(c, n);
    let mut slope = last / T::lit(2.0);
    if p <= T::zero() {
        if p < T::zero() {
            slope = T::zero();
        }
        p = T::zero();
    } else if p >= last {
        if p > last {
            slope = T::zero();
        }
        p = last;
    }
    // Coordinates produced by `normalized_coord` round-trip to integers only up
    // to rounding; snap them so integer-aligned sampling copies pixels exactly.
    let r = p.round();
    let tol = T::epsilon() * T::lit(8.0 * n as f64);
    if (p - r).abs() <= tol {
        p = r;
    }
    let lo = (p.floor().to_f64() as usize).min(n - 2);
    AxisSample { lo, hi: lo + 1, frac: p - T::lit(lo as f64), slope }
}

fn grid_dims<T: Scalar>(image: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    require_rank("grid_sample", image, 3)?;
    require_rank("grid_sample", flow, 3)?;
    if flow.dim(2) != 2 {
        return shape_err("grid_sample", flow.shape(), "flow [h, w, 2]");
    }
    Ok((image.dim(0), image.dim(1), image.dim(2), flow.dim(0), flow.dim(1)))
}

/// Backward bilinear warp: output pixel `(i, j)` samples `image[c×H×W]` at the
/// normalized (row, col) location `flow[i][j]`. Align-corners mapping, border
/// clamping.
pub fn grid_sample<T: Scalar>(image: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, oh, ow) = grid_dims(image, flow)?;
    let n_out = oh * ow;
    let samples: Vec<(AxisSample<T>, AxisSample<T>)> = flow
        .data()
        .chunks(2)
        .map(|f| (axis_sample(f[0], h), axis_sample(f[1], w)))
        .collect();
    let mut out = vec![T::zero(); c * n_out];
    par::for_each_row(&mut out, n_out, 8 * n_out, |ci, plane| {
        let src = &image.data()[ci * h * w..(ci + 1) * h * w];
        for (o, (sy, sx)) in plane.iter_mut().zip(&samples) {
            let (fy, fx) = (sy.frac, sx.frac);
            let top = src[sy.lo * w + sx.lo] * (T::one() - fx) + src[sy.lo * w + sx.hi] * fx;
            let bot = src[sy.hi * w + sx.lo] * (T::one() - fx) + src[sy.hi * w + sx.hi] * fx;
            *o = top * (T::one() - fy) + bot * fy;
        }
    });
    Tensor::new(vec![c, oh, ow], out)
}

/// Gradients of [`grid_sample`] with respect to the image and the flow.
pub fn grid_sample_backward<T: Scalar>(
    image: &Tensor<T>,
    flow: &Tensor<T>,
    dy: &Tensor<T>,
    need_dimage: bool,
    need_dflow: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (c, h, w, oh, ow) = grid_dims(image, flow).expect("validated in forward");
    let n_out = oh * ow;
    let samples: Vec<(AxisSample<T>, AxisSample<T>)> = flow
        .data()
        .chunks(2)
        .map(|f| (axis_sample(f[0], h), axis_sample(f[1], w)))
        .collect();
    let dimage = need_dimage.then(|| {
        let mut d = vec![T::zero(); c * h * w];
        par::for_each_row(&mut d, h * w, 8 * n_out, |ci, plane| {
            let g = &dy.data()[ci * n_out..(ci + 1) * n_out];
            for (&gv, (sy, sx)) in g.iter().zip(&samples) {
                let (fy, fx) = (sy.frac, sx.frac);
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                plane[sy.lo * w + sx.lo] += top * (T::one() - fx);
                plane[sy.lo * w + sx.hi] += top * fx;
                plane[sy.hi * w + sx.lo] += bot * (T::one() - fx);
                plane[sy.hi * w + sx.hi] += bot * fx;
            }
        });
        Tensor::new(vec![c, h, w], d).expect("shape")
    });
    let dflow = need_dflow.then(|| {
        let mut d = vec![T::zero(); n_out * 2];
        for (pix, (sy, sx)) in samples.iter().enumerate() {
            let (fy, fx) = (sy.frac, sx.frac);
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for ci in 0..c {
                let src = &image.data()[ci * h * w..(ci + 1) * h * w];
                let g = dy.data()[ci * n_out + pix];
                let (a, b) = (src[sy.lo * w + sx.lo], src[sy.lo * w + sx.hi]);
                let (cc, dd) = (src[sy.hi * w + sx.lo], src[sy.hi * w + sx.hi]);
                gy += g * ((cc - a) * (T::one() - fx) + (dd - b) * fx);
                gx += g * ((b - a) * (T::one() - fy) + (dd - cc) * fy);
            }
            d[2 * pix] = gy * sy.slope;
            d[2 * pix + 1] = gx * sx.slope;
        }
        Tensor::new(flow.shape().to_vec(), d).expect("shape")
    });
    (dimage, dflow)
}
