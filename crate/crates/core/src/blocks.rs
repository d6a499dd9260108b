//! Neck building blocks: asymmetric fusion, highway gate, CBAM,
//! UpConvMixer and the fusion block.

use glod_tensor::ops::{ConvSpec, Reduce};
use glod_tensor::{Real, Var};

use crate::error::{GlodError, Result};
use crate::params::{Ctx, Init};

fn spatial<T: Real>(cx: &Ctx<'_, T>, v: Var) -> (usize, usize) {
    let s = cx.graph.shape(v);
    (s[1], s[2])
}

fn channels<T: Real>(cx: &Ctx<'_, T>, v: Var) -> usize {
    cx.graph.shape(v)[0]
}

/// The three parallel kernels and the paddings that keep spatial size.
pub const ASYMMETRIC_KERNELS: [(&str, usize, usize); 3] = [("k1x3", 1, 3), ("k3x3", 3, 3), ("k3x1", 3, 1)];

/// `ReLU(sum_k BN(k * concat(x1, x2)))` over 1x3, 3x3 and 3x1 kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AsymmetricFusion {
    pub out_channels: usize,
}

impl AsymmetricFusion {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x1: Var, x2: Var) -> Result<Var> {
        let (a, b) = (spatial(cx, x1), spatial(cx, x2));
        if a != b {
            return Err(GlodError::Invalid(format!("{name}: inputs differ spatially, {a:?} vs {b:?}")));
        }
        let x = cx.graph.concat(&[x1, x2], 0)?;
        let mut sum = None;
        for (tag, kh, kw) in ASYMMETRIC_KERNELS {
            let y = cx.conv(&format!("{name}.{tag}"), x, self.out_channels, ConvSpec::same(kh, kw, 1), None)?;
            let y = cx.batch_norm(&format!("{name}.{tag}_bn"), y)?;
            sum = Some(match sum {
                None => y,
                Some(s) => cx.graph.add(s, y)?,
            });
        }
        Ok(cx.graph.relu(sum.expect("three branches")))
    }
}

/// Gate bias at construction; negative values start the block close to an
/// identity on the carried state.
pub const HIGHWAY_GATE_BIAS: f64 = -1.0;

/// `g * h + (1 - g) * x` with `g = sigmoid(pointwise(x))`.
pub fn highway<T: Real>(cx: &mut Ctx<'_, T>, name: &str, x: Var, h: Var) -> Result<Var> {
    if cx.graph.shape(x) != cx.graph.shape(h) {
        return Err(GlodError::Invalid(format!(
            "{name}: carry {:?} and transform {:?} differ",
            cx.graph.shape(x),
            cx.graph.shape(h)
        )));
    }
    let c = channels(cx, x);
    let gate = cx.conv(&format!("{name}.gate"), x, c, ConvSpec::pointwise(), Some(Init::Const(HIGHWAY_GATE_BIAS)))?;
    let g = cx.graph.sigmoid(gate);
    let diff = cx.graph.sub(h, x)?;
    let gated = cx.graph.mul(g, diff)?;
    Ok(cx.graph.add(x, gated)?)
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cbam {
    pub reduction: usize,
}

impl Cbam {
    pub const SPATIAL_KERNEL: usize = 7;

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x: Var) -> Result<Var> {
        let c = channels(cx, x);
        if self.reduction == 0 || c % self.reduction != 0 || c / self.reduction == 0 {
            return Err(GlodError::Invalid(format!("{name}: reduction {} does not divide {c} channels", self.reduction)));
        }
        let hidden = c / self.reduction;
        let mc = self.channel_attention(cx, name, x, hidden)?;
        let x1 = cx.graph.mul(x, mc)?;
        let ms = self.spatial_attention(cx, name, x1)?;
        Ok(cx.graph.mul(x1, ms)?)
    }

    /// `sigmoid(MLP(avgpool x) + MLP(maxpool x))`, shape `[C, 1, 1]`.
    pub fn channel_attention<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x: Var, hidden: usize) -> Result<Var> {
        let c = channels(cx, x);
        let branch = |cx: &mut Ctx<'_, T>, kind| -> Result<Var> {
            let p = cx.graph.reduce(x, kind)?;
            let h = cx.conv(&format!("{name}.mlp.0"), p, hidden, ConvSpec::pointwise(), None)?;
            let h = cx.graph.relu(h);
            cx.conv(&format!("{name}.mlp.1"), h, c, ConvSpec::pointwise(), None)
        };
        let a = branch(cx, Reduce::GlobalAvg)?;
        let m = branch(cx, Reduce::GlobalMax)?;
        let s = cx.graph.add(a, m)?;
        Ok(cx.graph.sigmoid(s))
    }

    /// `sigmoid(conv7x7([mean_c x, max_c x]))`, shape `[1, H, W]`.
    pub fn spatial_attention<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x: Var) -> Result<Var> {
        let avg = cx.graph.reduce(x, Reduce::ChannelAvg)?;
        let max = cx.graph.reduce(x, Reduce::ChannelMax)?;
        let both = cx.graph.concat(&[avg, max], 0)?;
        let k = Self::SPATIAL_KERNEL;
        let s = cx.conv(&format!("{name}.spatial"), both, 1, ConvSpec::same(k, k, 1), None)?;
        Ok(cx.graph.sigmoid(s))
    }
}

/// Where CBAM sits inside an UpConvMixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CbamPlacement {
    /// Once, after all mixer steps.
    End,
    /// After every mixer step.
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpConvMixer {
    /// Channel count inside the block; the output has a quarter of it.
    pub width: usize,
    pub steps: usize,
    pub dilation: usize,
    pub cbam: Cbam,
    pub placement: CbamPlacement,
}

impl UpConvMixer {
    pub fn new(width: usize, steps: usize, reduction: usize) -> Self {
        Self { width, steps, dilation: 2, cbam: Cbam { reduction }, placement: CbamPlacement::End }
    }

    pub fn out_channels(&self) -> usize {
        self.width / 4
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, name: &str, x1: Var, x2: Var) -> Result<Var> {
        if self.width % 4 != 0 || self.width == 0 {
            return Err(GlodError::Invalid(format!("{name}: width {} is not a positive multiple of 4", self.width)));
        }
        if self.steps == 0 {
            return Err(GlodError::Invalid(format!("{name}: needs at least one mixer step")));
        }
        let mut x = AsymmetricFusion { out_channels: self.width }.forward(cx, &format!("{name}.fusion"), x1, x2)?;
        let c = self.width;
        for i in 0..self.steps {
            let p = format!("{name}.mix.{i}");
            let dw = ConvSpec::same(3, 3, self.dilation).with_groups(c);
            let h = cx.conv(&format!("{p}.dw"), x, c, dw, None)?;
            let h = cx.batch_norm(&format!("{p}.dw_bn"), h)?;
            let h = cx.graph.gelu(h);
            let h = cx.conv(&format!("{p}.pw"), h, c, ConvSpec::pointwise(), None)?;
            let h = cx.batch_norm(&format!("{p}.pw_bn"), h)?;
            let h = cx.graph.gelu(h);
            x = highway(cx, &format!("{p}.highway"), x, h)?;
            if self.placement == CbamPlacement::PerStep {
                x = self.cbam.forward(cx, &format!("{p}.cbam"), x)?;
            }
        }
        if self.placement == CbamPlacement::End {
            x = self.cbam.forward(cx, &format!("{name}.cbam"), x)?;
        }
        Ok(cx.graph.pixel_shuffle(x, 2)?)
    }
}

/// `GELU(pointwise(high) + bilinear_f(pointwise(low)))`.
pub fn fusion_block<T: Real>(cx: &mut Ctx<'_, T>, name: &str, low: Var, high: Var) -> Result<Var> {
    let (lh, lw) = spatial(cx, low);
    let (hh, hw) = spatial(cx, high);
    let f = hh / lh;
    if f < 2 || lh * f != hh || lw * f != hw {
        return Err(GlodError::Invalid(format!(
            "{name}: high {hh}x{hw} is not an integer multiple >= 2 of low {lh}x{lw} in both axes"
        )));
    }
    let ch = channels(cx, high);
    let l = cx.conv(&format!("{name}.low"), low, ch, ConvSpec::pointwise(), Some(Init::Zeros))?;
    let l = cx.graph.bilinear_upsample(l, f)?;
    let h = cx.conv(&format!("{name}.high"), high, ch, ConvSpec::pointwise(), Some(Init::Zeros))?;
    let s = cx.graph.add(h, l)?;
    Ok(cx.graph.gelu(s))
}
