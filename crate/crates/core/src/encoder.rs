//! Miniature hierarchical windowed-attention encoder.
//!
//! Inside a stage tokens are kept as `[H, W, C]` so projections and layer
//! norms act on the last axis; stage outputs are returned as `[C, H, W]`.

use std::rc::Rc;

use glod_tensor::ops::ConvSpec;
use glod_tensor::{Real, Tensor, Var};

use crate::error::{GlodError, Result};
use crate::params::{Ctx, Init};

/// Added to attention logits between tokens from different source regions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub depths: [usize; 4],
    pub dims: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch_size: 4,
            window_size: 4,
            depths: [2, 2, 2, 2],
            dims: [32, 64, 128, 256],
            heads: [2, 4, 4, 8],
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    /// Side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.patch_size * 8 * self.window_size
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.patch_size == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(GlodError::Config("patch, window and mlp ratio must be positive".into()));
        }
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(GlodError::Config(format!("image {h}x{w} is not a multiple of {m} (patch x 8 x window)")));
        }
        for s in 0..4 {
            if self.heads[s] == 0 || self.dims[s] % self.heads[s] != 0 {
                return Err(GlodError::Config(format!("stage {s}: dim {} not divisible by {} heads", self.dims[s], self.heads[s])));
            }
            if self.depths[s] == 0 {
                return Err(GlodError::Config(format!("stage {s}: depth must be positive")));
            }
        }
        Ok(())
    }

    /// Stride of stage `s` relative to the input.
    pub fn stride(&self, s: usize) -> usize {
        self.patch_size << s
    }
}

/// `(window, shift)` actually used at a resolution: a map no larger than the
/// window is one unshifted window.
pub fn effective_window(h: usize, w: usize, window: usize, shifted: bool) -> (usize, usize) {
    if h.min(w) <= window {
        (h.min(w), 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// Flat index into a `[heads, (2w-1)^2]` bias table for every
/// `(head, query, key)` triple of a `w x w` window.
pub fn relative_position_index(window: usize, heads: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
                let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
                idx.push(h * span * span + dy as usize * span + dx as usize);
            }
        }
    }
    idx
}

/// Region label of every cell of the shifted grid; tokens with different
/// labels were not neighbours before the cyclic shift.
pub fn shift_region_labels(h: usize, w: usize, window: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(band(y, h) * 3 + band(x, w));
        }
    }
    labels
}

/// Additive mask `[nW, 1, N, N]` for shifted windows.
pub fn shift_mask<T: Real>(h: usize, w: usize, window: usize, shift: usize) -> Tensor<T> {
    let labels = shift_region_labels(h, w, window, shift);
    let (nh, nw, n) = (h / window, w / window, window * window);
    let mut data = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let at = |t: usize| labels[(wy * window + t / window) * w + wx * window + t % window];
            for i in 0..n {
                for j in 0..n {
                    data.push(if at(i) == at(j) { T::zero() } else { T::lit(MASK_VALUE) });
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, 1, n, n], data).expect("sized above")
}

/// `[H, W, C] -> [nW, w*w, C]`.
pub fn window_partition<T: Real>(cx: &mut Ctx<'_, T>, x: Var, window: usize) -> Result<Var> {
    let s = cx.graph.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let r = cx.graph.reshape(x, &[h / window, window, w / window, window, c])?;
    let p = cx.graph.permute(r, &[0, 2, 1, 3, 4])?;
    Ok(cx.graph.reshape(p, &[(h / window) * (w / window), window * window, c])?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Real>(cx: &mut Ctx<'_, T>, x: Var, window: usize, h: usize, w: usize) -> Result<Var> {
    let c = cx.graph.shape(x)[2];
    let r = cx.graph.reshape(x, &[h / window, w / window, window, window, c])?;
    let p = cx.graph.permute(r, &[0, 2, 1, 3, 4])?;
    Ok(cx.graph.reshape(p, &[h, w, c])?)
}

/// Multi-head self-attention inside (optionally shifted) windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowAttention {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowAttention {
    /// Tokens `[H, W, C]` in and out; also returns the attention
    /// probabilities `[nW, heads, N, N]`.
    pub fn forward_hwc<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x: Var) -> Result<(Var, Var)> {
        let s = cx.graph.shape(x).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let (win, shift, heads) = (self.window, self.shift, self.heads);
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(GlodError::Invalid(format!("{name}: {h}x{w} tokens not divisible by window {win}")));
        }
        if heads == 0 || c % heads != 0 {
            return Err(GlodError::Invalid(format!("{name}: {c} channels not divisible by {heads} heads")));
        }
        if shift >= win {
            return Err(GlodError::Invalid(format!("{name}: shift {shift} must be smaller than window {win}")));
        }
        let (n, d, nw) = (win * win, c / heads, (h / win) * (w / win));
        let shifted = if shift > 0 { cx.graph.roll(x, &[-(shift as isize), -(shift as isize), 0])? } else { x };
        let tokens = window_partition(cx, shifted, win)?;

        let q = cx.linear(&format!("{name}.q"), tokens, c, true)?;
        let k = cx.linear(&format!("{name}.k"), tokens, c, false)?;
        let v = cx.linear(&format!("{name}.v"), tokens, c, true)?;
        let split = |cx: &mut Ctx<'_, T>, t: Var| -> Result<Var> {
            let r = cx.graph.reshape(t, &[nw, n, heads, d])?;
            let p = cx.graph.permute(r, &[0, 2, 1, 3])?;
            Ok(cx.graph.reshape(p, &[nw * heads, n, d])?)
        };
        let q = split(cx, q)?;
        let q = cx.graph.scale(q, T::lit(1.0 / (d as f64).sqrt()));
        let k = split(cx, k)?;
        let kt = cx.graph.permute(k, &[0, 2, 1])?;
        let v = split(cx, v)?;

        let logits = cx.graph.matmul(q, kt)?;
        let logits = cx.graph.reshape(logits, &[nw, heads, n, n])?;
        let span = 2 * win - 1;
        let table = cx.param(&format!("{name}.rel_bias"), &[heads, span * span], Init::Normal(0.02))?;
        let bias = cx.graph.gather(table, Rc::new(relative_position_index(win, heads)), &[1, heads, n, n])?;
        let mut logits = cx.graph.add(logits, bias)?;
        if shift > 0 {
            let mask = cx.constant(shift_mask(h, w, win, shift));
            logits = cx.graph.add(logits, mask)?;
        }
        let attn = cx.graph.softmax(logits);
        let flat = cx.graph.reshape(attn, &[nw * heads, n, n])?;
        let out = cx.graph.matmul(flat, v)?;
        let out = cx.graph.reshape(out, &[nw, heads, n, d])?;
        let out = cx.graph.permute(out, &[0, 2, 1, 3])?;
        let out = cx.graph.reshape(out, &[nw, n, c])?;
        let out = cx.linear(&format!("{name}.proj"), out, c, true)?;
        let out = window_reverse(cx, out, win, h, w)?;
        let out = if shift > 0 { cx.graph.roll(out, &[shift as isize, shift as isize, 0])? } else { out };
        Ok((out, attn))
    }

    /// Channels-first wrapper around [`Self::forward_hwc`].
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x: Var) -> Result<Var> {
        let t = cx.graph.permute(x, &[1, 2, 0])?;
        let (y, _) = self.forward_hwc(cx, name, t)?;
        Ok(cx.graph.permute(y, &[2, 0, 1])?)
    }
}

/// Pre-norm transformer block on `[H, W, C]` tokens.
pub fn transformer_block<T: Real>(
    cx: &mut Ctx<'_, T>,
    name: &str,
    x: Var,
    attn: WindowAttention,
    mlp_ratio: usize,
) -> Result<Var> {
    let c = cx.graph.shape(x)[2];
    let h = cx.layer_norm(&format!("{name}.norm1"), x)?;
    let (h, _) = attn.forward_hwc(cx, &format!("{name}.attn"), h)?;
    let x = cx.graph.add(x, h)?;
    let h = cx.layer_norm(&format!("{name}.norm2"), x)?;
    let h = cx.linear(&format!("{name}.mlp.0"), h, c * mlp_ratio, true)?;
    let h = cx.graph.gelu(h);
    let h = cx.linear(&format!("{name}.mlp.1"), h, c, true)?;
    Ok(cx.graph.add(x, h)?)
}

/// `[C, H, W]` image to `[H/p, W/p, C0]` tokens via a stride-`p` convolution.
pub fn patch_embed<T: Real>(cx: &mut Ctx<'_, T>, name: &str, image: Var, patch: usize, dim: usize) -> Result<Var> {
    let s = cx.graph.shape(image).to_vec();
    if patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(GlodError::Invalid(format!("{name}: {}x{} not divisible by patch {patch}", s[1], s[2])));
    }
    let y = cx.conv(name, image, dim, ConvSpec::new(patch, patch).with_stride(patch), Some(Init::Zeros))?;
    Ok(cx.graph.permute(y, &[1, 2, 0])?)
}

/// Concatenates each 2x2 neighbourhood of `[H, W, C]` tokens and projects
/// `4C -> out_dim`.
pub fn patch_merge<T: Real>(cx: &mut Ctx<'_, T>, name: &str, x: Var, out_dim: usize) -> Result<Var> {
    let s = cx.graph.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(GlodError::Invalid(format!("{name}: {h}x{w} tokens must be even")));
    }
    // (y, dy, x, dx, c) -> (y, x, dx, dy, c): channel blocks ordered
    // (0,0), (1,0), (0,1), (1,1) in (dy, dx).
    let r = cx.graph.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let p = cx.graph.permute(r, &[0, 2, 3, 1, 4])?;
    let m = cx.graph.reshape(p, &[h / 2, w / 2, 4 * c])?;
    cx.linear(name, m, out_dim, false)
}

/// Runs all four stages; returns channels-first maps at strides
/// `p, 2p, 4p, 8p`.
pub fn encode<T: Real>(cx: &mut Ctx<'_, T>, name: &str, image: Var, cfg: &EncoderConfig) -> Result<[Var; 4]> {
    let s = cx.graph.shape(image).to_vec();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(GlodError::Invalid(format!("{name}: expected [{}, H, W] image, got {s:?}", cfg.in_channels)));
    }
    cfg.validate(s[1], s[2])?;
    let mut x = patch_embed(cx, &format!("{name}.patch_embed"), image, cfg.patch_size, cfg.dims[0])?;
    let mut outs = Vec::with_capacity(4);
    for st in 0..4 {
        if st > 0 {
            x = patch_merge(cx, &format!("{name}.stages.{st}.merge"), x, cfg.dims[st])?;
        }
        let (h, w) = (cx.graph.shape(x)[0], cx.graph.shape(x)[1]);
        for b in 0..cfg.depths[st] {
            let (window, shift) = effective_window(h, w, cfg.window_size, b % 2 == 1);
            let attn = WindowAttention { heads: cfg.heads[st], window, shift };
            x = transformer_block(cx, &format!("{name}.stages.{st}.blocks.{b}"), x, attn, cfg.mlp_ratio)?;
        }
        outs.push(cx.graph.permute(x, &[2, 0, 1])?);
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_is_symmetric_about_center() {
        let idx = relative_position_index(2, 1);
        // Diagonal entries all map to the zero offset.
        assert!((0..4).all(|i| idx[i * 4 + i] == 4));
        assert_eq!(idx.iter().max(), Some(&8));
    }

    #[test]
    fn unshifted_labels_are_uniform_bands() {
        let l = shift_region_labels(4, 4, 2, 1);
        assert_eq!(&l[..4], &[0, 0, 1, 2]);
        assert_eq!(l[15], 8);
    }

    #[test]
    fn small_maps_use_one_window() {
        assert_eq!(effective_window(2, 2, 4, true), (2, 0));
        assert_eq!(effective_window(8, 8, 4, true), (4, 2));
        assert_eq!(effective_window(8, 8, 4, false), (4, 0));
    }
}
