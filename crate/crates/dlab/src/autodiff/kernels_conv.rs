//! Convolution kernels on a transposed patch layout.
//!
//! Patch matrices are `(C*k*k, B*P)` with positions contiguous per row, so
//! gathering and scattering reduce to span copies along the fastest axis,
//! and the gemm output `(Cout, B*P)` converts to NCHW by plain memcpy.

use ndarray::{Array1, Array2, Array4, ArrayView4};

use super::Real;

#[cfg(feature = "parallel")]
use ndarray::parallel::prelude::*;
#[cfg(feature = "parallel")]
use ndarray::Axis;

/// `A . B` split across two threads when the product is large.
///
/// The split prefers disjoint output blocks (columns of B, then rows of A),
/// where every cell is produced by one thread and results are bitwise
/// independent of the split. Narrow outputs with a long inner dimension
/// fall back to a split-k partial-sum pair added in a fixed order, which is
/// equally deterministic run to run.
pub fn matmul<F: Real>(a: &ndarray::ArrayView2<F>, b: &ndarray::ArrayView2<F>) -> Array2<F> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    debug_assert_eq!(ka, kb, "matmul inner dimension mismatch");
    #[cfg(feature = "parallel")]
    {
        let flops = 2 * m * ka * n;
        if flops >= 1 << 21 {
            let one = F::ONE;
            let zero = F::ZERO;
            if n >= 128 {
                let mut out = Array2::<F>::from_elem((m, n), F::ZERO);
                let mid = n / 2;
                let (lo, hi) = out.view_mut().split_at(ndarray::Axis(1), mid);
                let (b_lo, b_hi) = b.split_at(ndarray::Axis(1), mid);
                rayon::join(
                    || {
                        let mut lo = lo;
                        ndarray::linalg::general_mat_mul(one, a, &b_lo, zero, &mut lo);
                    },
                    || {
                        let mut hi = hi;
                        ndarray::linalg::general_mat_mul(one, a, &b_hi, zero, &mut hi);
                    },
                );
                return out;
            }
            if m >= 128 {
                let mut out = Array2::<F>::from_elem((m, n), F::ZERO);
                let mid = m / 2;
                let (lo, hi) = out.view_mut().split_at(ndarray::Axis(0), mid);
                let (a_lo, a_hi) = a.split_at(ndarray::Axis(0), mid);
                rayon::join(
                    || {
                        let mut lo = lo;
                        ndarray::linalg::general_mat_mul(one, &a_lo, b, zero, &mut lo);
                    },
                    || {
                        let mut hi = hi;
                        ndarray::linalg::general_mat_mul(one, &a_hi, b, zero, &mut hi);
                    },
                );
                return out;
            }
            if ka >= 4096 {
                let mid = ka / 2;
                let (a_lo, a_hi) = a.split_at(ndarray::Axis(1), mid);
                let (b_lo, b_hi) = b.split_at(ndarray::Axis(0), mid);
                let (p_lo, p_hi) = rayon::join(|| a_lo.dot(&b_lo), || a_hi.dot(&b_hi));
                return p_lo + p_hi;
            }
        }
    }
    a.dot(b)
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

fn std_data<F: Real>(x: &ArrayView4<F>) -> (Vec<F>, bool) {
    match x.as_slice() {
        Some(_) => (Vec::new(), false),
        None => (x.as_standard_layout().into_owned().into_raw_vec_and_offset().0, true),
    }
}

macro_rules! slice_of {
    ($x:expr, $buf:expr, $copied:expr) => {
        if $copied { $buf.as_slice() } else { $x.as_slice().unwrap() }
    };
}

/// Gathers k x k patches over a `ph x pw` stride grid into a
/// `(C*k*k, B*ph*pw)` matrix; out-of-bounds taps stay zero.
pub fn im2col<F: Real>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ph: usize,
    pw: usize,
) -> Array2<F> {
    let (b, c, ih, iw) = x.dim();
    let (buf, copied) = std_data(x);
    let xs: &[F] = slice_of!(x, buf, copied);
    let p_total = ph * pw;
    let mut cols = Array2::<F>::from_elem((c * k * k, b * p_total), F::ZERO);

    let fill_row = |row_idx: usize, row: &mut [F]| {
        let ci = row_idx / (k * k);
        let ky = (row_idx / k) % k;
        let kx = row_idx % k;
        for bi in 0..b {
            let x_base = (bi * c + ci) * ih * iw;
            let out_base = bi * p_total;
            for py in 0..ph {
                let iy = (py * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                let x_row = x_base + iy as usize * iw;
                let o_row = out_base + py * pw;
                // px range with ix = px*stride + kx - pad inside [0, iw)
                let off = kx as isize - pad as isize;
                let px_lo = if off >= 0 { 0 } else { (-off as usize).div_ceil(stride) };
                // largest px with px*stride + off <= iw - 1
                let hi_num = iw as isize - 1 - off;
                if hi_num < 0 {
                    continue;
                }
                let px_hi = ((hi_num as usize) / stride).min(pw - 1);
                if px_lo > px_hi {
                    continue;
                }
                let n = px_hi - px_lo + 1;
                let src0 = (x_row as isize + (px_lo * stride) as isize + off) as usize;
                let dst = &mut row[o_row + px_lo..o_row + px_lo + n];
                if stride == 1 {
                    dst.copy_from_slice(&xs[src0..src0 + n]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = xs[src0 + j * stride];
                    }
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        cols.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(r, mut row)| {
            fill_row(r, row.as_slice_mut().unwrap());
        });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (r, mut row) in cols.rows_mut().into_iter().enumerate() {
            fill_row(r, row.as_slice_mut().unwrap());
        }
    }
    cols
}

/// Scatter-adds a `(C*k*k, B*ph*pw)` patch matrix back onto a zeroed
/// `(B, C, oh, ow)` grid: the adjoint of [`im2col`].
pub fn col2im<F: Real>(
    cols: &Array2<F>,
    out_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ph: usize,
    pw: usize,
) -> Array4<F> {
    let (b, c, oh, ow) = out_shape;
    let p_total = ph * pw;
    let mut out = Array4::<F>::from_elem(out_shape, F::ZERO);
    let cs = cols.as_slice().expect("cols standard layout");
    let ncols = b * p_total;

    let fill_batch = |bi: usize, plane: &mut [F]| {
        for row_idx in 0..c * k * k {
            let ci = row_idx / (k * k);
            let ky = (row_idx / k) % k;
            let kx = row_idx % k;
            let row = &cs[row_idx * ncols..(row_idx + 1) * ncols];
            let o_base = ci * oh * ow;
            for py in 0..ph {
                let oy = (py * stride + ky) as isize - pad as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                let o_row = o_base + oy as usize * ow;
                let c_row = bi * p_total + py * pw;
                let off = kx as isize - pad as isize;
                let px_lo = if off >= 0 { 0 } else { (-off as usize).div_ceil(stride) };
                let hi_num = ow as isize - 1 - off;
                if hi_num < 0 {
                    continue;
                }
                let px_hi = ((hi_num as usize) / stride).min(pw - 1);
                if px_lo > px_hi {
                    continue;
                }
                let n = px_hi - px_lo + 1;
                let dst0 = (o_row as isize + (px_lo * stride) as isize + off) as usize;
                let src = &row[c_row + px_lo..c_row + px_lo + n];
                if stride == 1 {
                    for (d, &s) in plane[dst0..dst0 + n].iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    for (j, &s) in src.iter().enumerate() {
                        plane[dst0 + j * stride] += s;
                    }
                }
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(bi, mut plane)| {
            fill_batch(bi, plane.as_slice_mut().unwrap());
        });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (bi, mut plane) in out.outer_iter_mut().enumerate() {
            fill_batch(bi, plane.as_slice_mut().unwrap());
        }
    }
    out
}

/// `(B, C, H, W)` to `(C, B*H*W)` by span copies.
fn nchw_to_cb<F: Real>(x: &ArrayView4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let p = h * w;
    let (buf, copied) = std_data(x);
    let xs: &[F] = slice_of!(x, buf, copied);
    let mut out = Array2::<F>::from_elem((c, b * p), F::ZERO);
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for bi in 0..b {
            let src = (bi * c + ci) * p;
            let dst = ci * b * p + bi * p;
            os[dst..dst + p].copy_from_slice(&xs[src..src + p]);
        }
    }
    out
}

/// `(C, B*H*W)` back to `(B, C, H, W)` by span copies.
fn cb_to_nchw<F: Real>(m: &Array2<F>, b: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    let p = h * w;
    let ms = m.as_slice().expect("cb standard layout");
    let mut out = Array4::<F>::from_elem((b, c, h, w), F::ZERO);
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let src = ci * b * p + bi * p;
            let dst = (bi * c + ci) * p;
            os[dst..dst + p].copy_from_slice(&ms[src..src + p]);
        }
    }
    out
}

/// Convolution forward; weights `(Cout, Cin, k, k)`, bias `(Cout,)`.
/// Optionally returns the patch matrix for reuse in the backward pass.
pub fn conv2d_fwd<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> (Array4<F>, Option<Array2<F>>) {
    let (bs, cin, ih, iw) = x.dim();
    let (cout, cin_w, k, _) = w.dim();
    debug_assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let ph = conv_out_size(ih, k, stride, pad);
    let pw = conv_out_size(iw, k, stride, pad);
    let cols = im2col(x, k, stride, pad, ph, pw);
    let w2 = w.to_shape((cout, cin_w * k * k)).expect("conv weight reshape");
    let mut out2 = matmul(&w2.view(), &cols.view()); // (Cout, B*P)
    for (co, mut row) in out2.rows_mut().into_iter().enumerate() {
        let bias = b[co];
        row.mapv_inplace(|v| v + bias);
    }
    let out = cb_to_nchw(&out2, bs, cout, ph, pw);
    (out, keep_cols.then_some(cols))
}

/// Weight and bias gradients of a convolution.
pub fn conv2d_bwd_wb<F: Real>(
    cols: &Array2<F>,
    dout: &ArrayView4<F>,
    w_shape: (usize, usize, usize, usize),
) -> (Array4<F>, Array1<F>) {
    let (cout, _cin, _k, _) = w_shape;
    let dout_t = nchw_to_cb(dout); // (Cout, B*P)
    let dw2 = matmul(&dout_t.view(), &cols.t()); // (Cout, CKK)
    let dw = dw2.into_shape_with_order(w_shape).expect("dw reshape");
    let mut db = Array1::<F>::from_elem(cout, F::ZERO);
    for (co, row) in dout_t.rows().into_iter().enumerate() {
        let mut acc = F::ZERO;
        for &v in row.iter() {
            acc = acc + v;
        }
        db[co] = acc;
    }
    (dw, db)
}

/// Input gradient of a convolution.
pub fn conv2d_bwd_x<F: Real>(
    w: &ArrayView4<F>,
    dout: &ArrayView4<F>,
    x_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (cout, cin, k, _) = w.dim();
    let (_, _, ph, pw) = dout.dim();
    let w2 = w.to_shape((cout, cin * k * k)).expect("conv weight reshape");
    let dout_t = nchw_to_cb(dout); // (Cout, B*P)
    let dcols = matmul(&w2.t(), &dout_t.view()); // (CKK, B*P)
    col2im(&dcols, x_shape, k, stride, pad, ph, pw)
}

/// Transposed convolution forward; weights `(Cin, Cout, k, k)`.
pub fn conv_transpose2d_fwd<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (bs, cin, ih, iw) = x.dim();
    let (cin_w, cout, k, _) = w.dim();
    debug_assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
    let oh = conv_transpose_out_size(ih, k, stride, pad);
    let ow = conv_transpose_out_size(iw, k, stride, pad);
    let x_t = nchw_to_cb(x); // (Cin, B*P)
    let w2 = w.to_shape((cin_w, cout * k * k)).expect("convT weight reshape");
    let cols = matmul(&w2.t(), &x_t.view()); // (Cout*k*k, B*P)
    let mut out = col2im(&cols, (bs, cout, oh, ow), k, stride, pad, ih, iw);
    let os = out.as_slice_mut().unwrap();
    let plane = oh * ow;
    for bi in 0..bs {
        for co in 0..cout {
            let bias = b[co];
            let base = (bi * cout + co) * plane;
            for v in &mut os[base..base + plane] {
                *v = *v + bias;
            }
        }
    }
    out
}

/// Gradients of a transposed convolution: input, weights, bias.
pub fn conv_transpose2d_bwd<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    dout: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (bs, cin, ih, iw) = x.dim();
    let (_, cout, k, _) = w.dim();
    let dcols = im2col(dout, k, stride, pad, ih, iw); // (Cout*k*k, B*P)
    let w2 = w.to_shape((cin, cout * k * k)).expect("convT weight reshape");
    let dx_t = matmul(&w2.view(), &dcols.view()); // (Cin, B*P)
    let dx = cb_to_nchw(&dx_t, bs, cin, ih, iw);

    let x_t = nchw_to_cb(x); // (Cin, B*P)
    let dw2 = matmul(&x_t.view(), &dcols.t()); // (Cin, Cout*k*k)
    let dw = dw2
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cin, cout, k, k))
        .expect("dw reshape");

    let dout_t = nchw_to_cb(dout);
    let mut db = Array1::<F>::from_elem(cout, F::ZERO);
    for (co, row) in dout_t.rows().into_iter().enumerate() {
        let mut acc = F::ZERO;
        for &v in row.iter() {
            acc = acc + v;
        }
        db[co] = acc;
    }
    (dx, dw, db)
}
