//! Spatial rearrangement and resampling of `[C, H, W]` maps.

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Channel-to-space rearrangement: `out[c, h*r+dy, w*r+dx] = in[c*r*r + dy*r + dx, h, w]`.
pub fn pixel_shuffle<T: Real>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (cin, h, w) = input.dims3("pixel_shuffle")?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(invalid("pixel_shuffle", format!("{cin} channels not divisible by r^2 = {}", r * r)));
    }
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![T::zero(); input.numel()];
    for co in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let plane = &src[(co * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    let row = &mut out[(co * ho + y * r + dy) * wo..][..wo];
                    for x in 0..w {
                        row[x * r + dx] = plane[y * w + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Inverse of [`pixel_shuffle`]; also its exact gradient.
pub fn pixel_unshuffle<T: Real>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, ho, wo) = input.dims3("pixel_unshuffle")?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(invalid("pixel_unshuffle", format!("{ho}x{wo} not divisible by {r}")));
    }
    let (h, w) = (ho / r, wo / r);
    let src = input.data();
    let mut out = vec![T::zero(); input.numel()];
    for co in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let plane = &mut out[(co * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    let row = &src[(co * ho + y * r + dy) * wo..][..wo];
                    for x in 0..w {
                        plane[y * w + x] = row[x * r + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c * r * r, h, w], out))
}

/// Source taps `(i0, i1, frac)` for half-pixel bilinear resampling by `factor`.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel centers
/// (`align_corners = false`), edge-clamped.
pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("bilinear_upsample")?;
    if factor == 0 {
        return Err(invalid("bilinear_upsample", "factor must be >= 1"));
    }
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let plane = input.channel(ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out[(ch * ho + oy) * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Adjoint of [`bilinear_upsample`] applied to an upstream gradient.
pub fn bilinear_upsample_backward<T: Real>(grad_out: &Tensor<T>, in_h: usize, in_w: usize, factor: usize) -> Tensor<T> {
    let c = grad_out.shape()[0];
    let (ty, tx) = (taps(in_h, factor), taps(in_w, factor));
    let wo = in_w * factor;
    let ho = in_h * factor;
    let mut dx = vec![T::zero(); c * in_h * in_w];
    for ch in 0..c {
        let g = &grad_out.data()[ch * ho * wo..(ch + 1) * ho * wo];
        let d = &mut dx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = g[oy * wo + ox];
                d[y0 * in_w + x0] += v * (T::one() - fy) * (T::one() - fx);
                d[y0 * in_w + x1] += v * (T::one() - fy) * fx;
                d[y1 * in_w + x0] += v * fy * (T::one() - fx);
                d[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::from_parts(vec![c, in_h, in_w], dx)
}

/// Stride-1 max pooling with an odd `window` and `-inf` padding, so the
/// output keeps the input's spatial size.
pub fn max_pool2d_same<T: Real>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("max_pool2d_same")?;
    if window == 0 || window % 2 == 0 {
        return Err(invalid("max_pool2d_same", format!("window must be odd, got {window}")));
    }
    let r = window / 2;
    // Separable: a row pass followed by a column pass gives the same maxima.
    let mut rows = vec![T::neg_infinity(); c * h * w];
    for ch in 0..c {
        let plane = input.channel(ch);
        for y in 0..h {
            for x in 0..w {
                let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
                let m = plane[y * w + lo..=y * w + hi].iter().copied().fold(T::neg_infinity(), T::max);
                rows[(ch * h + y) * w + x] = m;
            }
        }
    }
    let mut out = vec![T::neg_infinity(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let mut m = T::neg_infinity();
                for yy in lo..=hi {
                    m = m.max(rows[(ch * h + yy) * w + x]);
                }
                out[(ch * h + y) * w + x] = m;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
