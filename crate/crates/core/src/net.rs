//! Encoder, four cascaded UpConvMixers with skip inputs, optional fusion
//! cascade, and the three-branch centre-point head.

use std::fmt::Write as _;

use glod_tensor::ops::ConvSpec;
use glod_tensor::{Real, Tensor, Var};

use crate::blocks::{fusion_block, CbamPlacement, UpConvMixer};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{GlodError, Result};
use crate::params::{Ctx, Init, Mode, ParamStore};

/// Prior probability the heatmap bias encodes at initialization.
pub const HEATMAP_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct GlodConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    /// Internal UpConvMixer widths for levels 1..=4 (finest first).
    pub ucm_widths: [usize; 4],
    pub ucm_steps: usize,
    pub cbam_reduction: usize,
    pub cbam_placement: CbamPlacement,
    pub head_width: usize,
    pub num_classes: usize,
    pub output_stride: usize,
    pub fusion: bool,
}

impl GlodConfig {
    /// 128x128 inputs, five classes.
    pub fn desk() -> Self {
        Self {
            image_size: 128,
            encoder: EncoderConfig::default(),
            ucm_widths: [64, 64, 128, 128],
            ucm_steps: 3,
            cbam_reduction: 16,
            cbam_placement: CbamPlacement::End,
            head_width: 32,
            num_classes: 5,
            output_stride: 4,
            fusion: true,
        }
    }

    /// 64x64 inputs with narrow widths, sized for CPU training runs.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            encoder: EncoderConfig {
                window_size: 2,
                dims: [16, 32, 64, 128],
                heads: [1, 2, 2, 4],
                ..EncoderConfig::default()
            },
            ucm_widths: [32, 32, 64, 64],
            cbam_reduction: 8,
            head_width: 32,
            ..Self::desk()
        }
    }

    /// 32x32 inputs and a handful of channels, for finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            image_size: 32,
            encoder: EncoderConfig {
                patch_size: 2,
                window_size: 2,
                depths: [2, 2, 2, 2],
                dims: [4, 8, 16, 32],
                heads: [1, 1, 2, 2],
                ..EncoderConfig::default()
            },
            ucm_widths: [8, 8, 16, 16],
            ucm_steps: 3,
            cbam_reduction: 4,
            head_width: 8,
            num_classes: 2,
            output_stride: 2,
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "toy" => Some(Self::toy()),
            "gradcheck" => Some(Self::gradcheck()),
            _ => None,
        }
    }

    /// Stride of the finest UpConvMixer output.
    fn neck_stride(&self) -> usize {
        self.encoder.patch_size / 2
    }

    /// Stride of the head's first convolution.
    pub fn head_stride(&self) -> usize {
        self.output_stride / self.neck_stride().max(1)
    }

    pub fn heatmap_size(&self) -> usize {
        self.image_size / self.output_stride
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.image_size, self.image_size)?;
        let p = self.encoder.patch_size;
        if p % 2 != 0 {
            return Err(GlodError::Config(format!("patch size {p} must be even")));
        }
        if self.output_stride == 0 || self.output_stride % (p / 2) != 0 {
            return Err(GlodError::Config(format!(
                "output stride {} must be a multiple of the neck stride {}",
                self.output_stride,
                p / 2
            )));
        }
        if self.image_size % self.output_stride != 0 {
            return Err(GlodError::Config("image size must be a multiple of the output stride".into()));
        }
        for (i, &w) in self.ucm_widths.iter().enumerate() {
            if w == 0 || w % 4 != 0 || w % self.cbam_reduction != 0 {
                return Err(GlodError::Config(format!(
                    "UCM{} width {w} must be a multiple of 4 and of the CBAM reduction {}",
                    i + 1,
                    self.cbam_reduction
                )));
            }
        }
        if self.ucm_steps == 0 || self.num_classes == 0 || self.head_width == 0 {
            return Err(GlodError::Config("ucm steps, classes and head width must be positive".into()));
        }
        Ok(())
    }

    /// Plain `key=value` lines.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "in_channels={}", e.in_channels);
        let _ = writeln!(s, "patch_size={}", e.patch_size);
        let _ = writeln!(s, "window_size={}", e.window_size);
        let _ = writeln!(s, "depths={}", list(&e.depths));
        let _ = writeln!(s, "dims={}", list(&e.dims));
        let _ = writeln!(s, "heads={}", list(&e.heads));
        let _ = writeln!(s, "mlp_ratio={}", e.mlp_ratio);
        let _ = writeln!(s, "ucm_widths={}", list(&self.ucm_widths));
        let _ = writeln!(s, "ucm_steps={}", self.ucm_steps);
        let _ = writeln!(s, "cbam_reduction={}", self.cbam_reduction);
        let placement = match self.cbam_placement {
            CbamPlacement::End => "end",
            CbamPlacement::PerStep => "per_step",
        };
        let _ = writeln!(s, "cbam_placement={placement}");
        let _ = writeln!(s, "head_width={}", self.head_width);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "output_stride={}", self.output_stride);
        let _ = writeln!(s, "fusion={}", self.fusion);
        s
    }

    /// Parses [`Self::to_text`] output. Unknown keys are ignored so other
    /// metadata can share the block.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let bad = |k: &str, v: &str| GlodError::Config(format!("bad value `{v}` for `{k}`"));
        let num = |k: &str, v: &str| v.trim().parse::<usize>().map_err(|_| bad(k, v));
        let arr = |k: &str, v: &str| -> Result<[usize; 4]> {
            let xs: Vec<usize> = v.split(',').map(|x| num(k, x)).collect::<Result<_>>()?;
            xs.try_into().map_err(|_| bad(k, v))
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k {
                "image_size" => cfg.image_size = num(k, v)?,
                "in_channels" => cfg.encoder.in_channels = num(k, v)?,
                "patch_size" => cfg.encoder.patch_size = num(k, v)?,
                "window_size" => cfg.encoder.window_size = num(k, v)?,
                "depths" => cfg.encoder.depths = arr(k, v)?,
                "dims" => cfg.encoder.dims = arr(k, v)?,
                "heads" => cfg.encoder.heads = arr(k, v)?,
                "mlp_ratio" => cfg.encoder.mlp_ratio = num(k, v)?,
                "ucm_widths" => cfg.ucm_widths = arr(k, v)?,
                "ucm_steps" => cfg.ucm_steps = num(k, v)?,
                "cbam_reduction" => cfg.cbam_reduction = num(k, v)?,
                "cbam_placement" => {
                    cfg.cbam_placement = match v {
                        "end" => CbamPlacement::End,
                        "per_step" => CbamPlacement::PerStep,
                        _ => return Err(bad(k, v)),
                    }
                }
                "head_width" => cfg.head_width = num(k, v)?,
                "num_classes" => cfg.num_classes = num(k, v)?,
                "output_stride" => cfg.output_stride = num(k, v)?,
                "fusion" => cfg.fusion = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Head branches: heatmap `[K, h, w]` in (0, 1), offset `[2, h, w]`,
/// size `[2, h, w]` (positive, feature-map units).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<V> {
    pub heatmap: V,
    pub offset: V,
    pub size: V,
}

impl<T: Real> HeadOutput<Tensor<T>> {
    pub fn cast<U: Real>(&self) -> HeadOutput<Tensor<U>> {
        HeadOutput { heatmap: self.heatmap.cast(), offset: self.offset.cast(), size: self.size.cast() }
    }
}

/// The assembled detector. Holds only the configuration; parameters live in
/// a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Glod {
    pub config: GlodConfig,
}

impl Glod {
    pub fn new(config: GlodConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn ucm(&self, level: usize) -> UpConvMixer {
        let c = &self.config;
        UpConvMixer { placement: c.cbam_placement, ..UpConvMixer::new(c.ucm_widths[level], c.ucm_steps, c.cbam_reduction) }
    }

    /// Neck output feeding the head.
    pub fn neck<T: Real>(&self, cx: &mut Ctx<'_, T>, feats: [Var; 4]) -> Result<Var> {
        let dims = self.config.encoder.dims;
        let proj = cx.conv("neck.proj", feats[3], dims[3], ConvSpec::pointwise(), Some(Init::Zeros))?;
        let u4 = self.ucm(3).forward(cx, "neck.ucm4", feats[3], proj)?;
        let u3 = self.ucm(2).forward(cx, "neck.ucm3", u4, feats[2])?;
        let u2 = self.ucm(1).forward(cx, "neck.ucm2", u3, feats[1])?;
        let u1 = self.ucm(0).forward(cx, "neck.ucm1", u2, feats[0])?;
        if !self.config.fusion {
            return Ok(u1);
        }
        let f = fusion_block(cx, "neck.fuse3", u4, u3)?;
        let f = fusion_block(cx, "neck.fuse2", f, u2)?;
        fusion_block(cx, "neck.fuse1", f, u1)
    }

    pub fn head<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<HeadOutput<Var>> {
        let c = &self.config;
        let spec = ConvSpec::same(3, 3, 1).with_stride(c.head_stride());
        let prior = -((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR).ln();
        let branch = |cx: &mut Ctx<'_, T>, tag: &str, out: usize, bias: f64| -> Result<Var> {
            let h = cx.conv(&format!("head.{tag}.conv"), x, c.head_width, spec, Some(Init::Zeros))?;
            let h = cx.graph.gelu(h);
            cx.conv(&format!("head.{tag}.out"), h, out, ConvSpec::pointwise(), Some(Init::Const(bias)))
        };
        let hm = branch(cx, "heatmap", c.num_classes, prior)?;
        let off = branch(cx, "offset", 2, 0.0)?;
        let size = branch(cx, "size", 2, 0.0)?;
        let heatmap = cx.graph.sigmoid(hm);
        let size = cx.graph.exp(size);
        Ok(HeadOutput { heatmap, offset: off, size })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, image: Var) -> Result<HeadOutput<Var>> {
        let feats = encode(cx, "encoder", image, &self.config.encoder)?;
        let x = self.neck(cx, feats)?;
        self.head(cx, x)
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        {
            let mut cx = Ctx::initializing(&mut store, Mode::Train, seed);
            let s = self.config.image_size;
            let img = cx.constant(Tensor::zeros(vec![self.config.encoder.in_channels, s, s]));
            self.forward(&mut cx, img)?;
        }
        Ok(store)
    }

    /// Eval-mode forward returning plain tensors.
    pub fn predict<T: Real>(&self, store: &mut ParamStore<T>, image: &Tensor<T>) -> Result<HeadOutput<Tensor<T>>> {
        let mut cx = Ctx::new(store, Mode::Eval);
        let img = cx.constant(image.clone());
        let out = self.forward(&mut cx, img)?;
        Ok(HeadOutput {
            heatmap: cx.graph.value(out.heatmap).clone(),
            offset: cx.graph.value(out.offset).clone(),
            size: cx.graph.value(out.size).clone(),
        })
    }
}

/// Exact number of learnable scalars for `config`.
pub fn parameter_count(config: &GlodConfig) -> Result<usize> {
    Ok(Glod::new(config.clone())?.init::<f32>(0)?.scalar_count())
}
