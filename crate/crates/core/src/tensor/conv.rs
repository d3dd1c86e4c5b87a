//! 2D convolution on NCHW buffers via patch matrices.

use super::gemm::gemm;
use crate::scalar::Scalar;

/// Geometry of a (transposed) convolution. `in_*` always refers to the
/// tensor fed into the op, `out_*` to the produced tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_dim + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn conv_transpose_out(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let full = (in_dim - 1) * stride + k;
        if full <= 2 * pad || stride == 0 {
            return None;
        }
        Some(full - 2 * pad)
    }
}

/// Patch matrix of one `[c, h, w]` image: row `(c, ki, kj)`, column
/// `(gh, gw)` holds pixel `(gh * stride + ki - pad, gw * stride + kj - pad)`
/// or zero outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, grid_h: usize, grid_w: usize, cols: &mut [T]) {
    let (kh, kw, s) = (g.k_h, g.k_w, g.stride);
    let p = g.pad as isize;
    let gsz = grid_h * grid_w;
    for ch in 0..c {
        let plane = &img[ch * h * w..][..h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ch * kh + ki) * kw + kj) * gsz..][..gsz];
                for gh in 0..grid_h {
                    let ih = (gh * s + ki) as isize - p;
                    let dst = &mut row[gh * grid_w..][..grid_w];
                    if ih < 0 || ih >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..][..w];
                    for (gw, v) in dst.iter_mut().enumerate() {
                        let iw = (gw * s + kj) as isize - p;
                        *v = if iw < 0 || iw >= w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back into the image, adding.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, grid_h: usize, grid_w: usize, img: &mut [T]) {
    let (kh, kw, s) = (g.k_h, g.k_w, g.stride);
    let p = g.pad as isize;
    let gsz = grid_h * grid_w;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..][..h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ch * kh + ki) * kw + kj) * gsz..][..gsz];
                for gh in 0..grid_h {
                    let ih = (gh * s + ki) as isize - p;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..][..w];
                    for (gw, &v) in row[gh * grid_w..][..grid_w].iter().enumerate() {
                        let iw = (gw * s + kj) as isize - p;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T], plane: usize) {
    for (ch, out) in y.chunks_mut(plane).enumerate() {
        let bv = b[ch % b.len()];
        out.iter_mut().for_each(|v| *v += bv);
    }
}

fn bias_grad<T: Scalar>(dy: &[T], db: &mut [T], plane: usize) {
    for (ch, g) in dy.chunks(plane).enumerate() {
        let k = db.len();
        db[ch % k] += g.iter().copied().sum::<T>();
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ck = g.in_ch * g.k_h * g.k_w;
    let (isz, osz) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut cols = vec![T::zero(); ck * osz];
    let mut y = vec![T::zero(); g.batch * g.out_ch * osz];
    for n in 0..g.batch {
        im2col(&x[n * g.in_ch * isz..][..g.in_ch * isz], g.in_ch, g.in_h, g.in_w, g, g.out_h, g.out_w, &mut cols);
        gemm(g.out_ch, ck, osz, w, false, &cols, false, &mut y[n * g.out_ch * osz..][..g.out_ch * osz], false);
    }
    if let Some(b) = bias {
        add_bias(&mut y, b, osz);
    }
    y
}

/// Accumulates input, weight and bias gradients of a convolution.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ck = g.in_ch * g.k_h * g.k_w;
    let (isz, osz) = (g.in_h * g.in_w, g.out_h * g.out_w);
    if let Some(db) = db {
        bias_grad(dy, db, osz);
    }
    let mut cols = vec![T::zero(); ck * osz];
    for n in 0..g.batch {
        let gout = &dy[n * g.out_ch * osz..][..g.out_ch * osz];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * g.in_ch * isz..][..g.in_ch * isz], g.in_ch, g.in_h, g.in_w, g, g.out_h, g.out_w, &mut cols);
            gemm(g.out_ch, osz, ck, gout, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(ck, g.out_ch, osz, w, true, gout, false, &mut cols, false);
            col2im(&cols, g.in_ch, g.in_h, g.in_w, g, g.out_h, g.out_w, &mut dx[n * g.in_ch * isz..][..g.in_ch * isz]);
        }
    }
}

/// Transposed convolution; `w` is laid out `[in_ch, out_ch, k_h, k_w]`.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ck = g.out_ch * g.k_h * g.k_w;
    let (isz, osz) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut cols = vec![T::zero(); ck * isz];
    let mut y = vec![T::zero(); g.batch * g.out_ch * osz];
    for n in 0..g.batch {
        gemm(ck, g.in_ch, isz, w, true, &x[n * g.in_ch * isz..][..g.in_ch * isz], false, &mut cols, false);
        col2im(&cols, g.out_ch, g.out_h, g.out_w, g, g.in_h, g.in_w, &mut y[n * g.out_ch * osz..][..g.out_ch * osz]);
    }
    if let Some(b) = bias {
        add_bias(&mut y, b, osz);
    }
    y
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ck = g.out_ch * g.k_h * g.k_w;
    let (isz, osz) = (g.in_h * g.in_w, g.out_h * g.out_w);
    if let Some(db) = db {
        bias_grad(dy, db, osz);
    }
    let mut cols = vec![T::zero(); ck * isz];
    for n in 0..g.batch {
        im2col(&dy[n * g.out_ch * osz..][..g.out_ch * osz], g.out_ch, g.out_h, g.out_w, g, g.in_h, g.in_w, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(g.in_ch, ck, isz, w, false, &cols, false, &mut dx[n * g.in_ch * isz..][..g.in_ch * isz], true);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(g.in_ch, isz, ck, &x[n * g.in_ch * isz..][..g.in_ch * isz], false, &cols, true, dw, true);
        }
    }
}
