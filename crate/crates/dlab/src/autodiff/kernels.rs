//! Dense numeric kernels behind the tape ops.
//!
//! Everything works on NCHW arrays. Convolution lives in `kernels_conv`
//! (one im2col/col2im pair serves convolution forward, both convolution
//! gradients, and transposed convolution in both directions); this module
//! adds corner-aligned bilinear resampling.

use ndarray::{Array4, ArrayView4};

pub use super::kernels_conv::*;

use super::Real;

/// Per-axis source index pair and interpolation weight for corner-aligned
/// bilinear resampling.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Corner-aligned bilinear resize of the spatial axes of a `(B, C, H, W)`
/// array. Output corners equal input corners; constants are preserved
/// exactly (factored lerp, clamped to the hull of the four taps).
pub fn bilinear_resize<F: Real>(x: &ArrayView4<F>, th: usize, tw: usize) -> Array4<F> {
    let (b, c, ih, iw) = x.dim();
    let ytaps = bilinear_taps(ih, th);
    let xtaps: Vec<(usize, usize, F)> =
        bilinear_taps(iw, tw).into_iter().map(|(a, bb, t)| (a, bb, F::from_f64(t))).collect();
    let owned;
    let xs: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut out = Array4::<F>::from_elem((b, c, th, tw), F::ZERO);
    let os = out.as_slice_mut().unwrap();
    let lerp = |a: F, bb: F, t: F| a + t * (bb - a);

    let fill_plane = |plane_idx: usize, oplane: &mut [F]| {
        let xp = &xs[plane_idx * ih * iw..(plane_idx + 1) * ih * iw];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            let ty = F::from_f64(fy);
            let row0 = &xp[y0 * iw..y0 * iw + iw];
            let row1 = &xp[y1 * iw..y1 * iw + iw];
            let orow = &mut oplane[oy * tw..oy * tw + tw];
            for (o, &(x0, x1, tx)) in orow.iter_mut().zip(&xtaps) {
                let (a, bv) = (row0[x0], row0[x1]);
                let (cv, dv) = (row1[x0], row1[x1]);
                let v = lerp(lerp(a, bv, tx), lerp(cv, dv, tx), ty);
                // rounding can leave the convex hull by an ulp; clamp back
                let lo = a.min_v(bv).min_v(cv).min_v(dv);
                let hi = a.max_v(bv).max_v(cv).max_v(dv);
                *o = v.max_v(lo).min_v(hi);
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        os.par_chunks_mut(th * tw)
            .enumerate()
            .for_each(|(idx, oplane)| fill_plane(idx, oplane));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (idx, oplane) in os.chunks_mut(th * tw).enumerate() {
            fill_plane(idx, oplane);
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters output-space gradients back to
/// input space with the same interpolation weights.
pub fn bilinear_resize_bwd<F: Real>(dout: &ArrayView4<F>, ih: usize, iw: usize) -> Array4<F> {
    let (b, c, th, tw) = dout.dim();
    let ytaps = bilinear_taps(ih, th);
    let xtaps: Vec<(usize, usize, F)> =
        bilinear_taps(iw, tw).into_iter().map(|(a, bb, t)| (a, bb, F::from_f64(t))).collect();
    let owned;
    let gs: &[F] = match dout.as_slice() {
        Some(s) => s,
        None => {
            owned = dout.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut dx = Array4::<F>::from_elem((b, c, ih, iw), F::ZERO);
    let ds = dx.as_slice_mut().unwrap();

    let fill_plane = |plane_idx: usize, dplane: &mut [F]| {
        let gp = &gs[plane_idx * th * tw..(plane_idx + 1) * th * tw];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            let wy1 = F::from_f64(fy);
            let wy0 = F::ONE - wy1;
            let grow = &gp[oy * tw..oy * tw + tw];
            for (&g, &(x0, x1, tx)) in grow.iter().zip(&xtaps) {
                let wx0 = F::ONE - tx;
                dplane[y0 * iw + x0] += g * wy0 * wx0;
                dplane[y0 * iw + x1] += g * wy0 * tx;
                dplane[y1 * iw + x0] += g * wy1 * wx0;
                dplane[y1 * iw + x1] += g * wy1 * tx;
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ds.par_chunks_mut(ih * iw)
            .enumerate()
            .for_each(|(idx, dplane)| fill_plane(idx, dplane));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (idx, dplane) in ds.chunks_mut(ih * iw).enumerate() {
            fill_plane(idx, dplane);
        }
    }
    dx
}
