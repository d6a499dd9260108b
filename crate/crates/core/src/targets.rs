//! Ground-truth encoding: Gaussian class heatmaps, centre offsets, sizes
//! and the sampled background cells used by the classification loss.

use glod_tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GlodError, Result};
use crate::net::HeadOutput;

pub const MIN_OVERLAP: f64 = 0.7;
pub const MIN_RADIUS: f64 = 1.0;
/// Fraction of pure-background cells entering the loss each step.
pub const NEG_RATIO: f64 = 0.02;
/// Heatmap values below this count as pure background.
pub const BACKGROUND_LEVEL: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub class_id: usize,
    /// Centre in input pixels.
    pub cx: f32,
    pub cy: f32,
    /// Extent in input pixels.
    pub w: f32,
    pub h: f32,
}

impl GroundTruthObject {
    pub fn new(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { class_id, cx, cy, w, h }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn bbox(&self) -> [f32; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }
}

/// Smallest root of each of the three corner-perturbation quadratics
/// (one corner in / one out, both in, both out) without the lower clamp.
pub fn gaussian_radius_unclamped(w: f64, h: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let s = w + h;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (s - (s * s - 4.0 * c1).sqrt()) / 2.0;
    let r2 = (2.0 * s - (4.0 * s * s - 16.0 * (1.0 - o) * w * h).sqrt()) / 8.0;
    let r3 = (-2.0 * o * s + (4.0 * o * o * s * s + 16.0 * o * (1.0 - o) * w * h).sqrt()) / (8.0 * o);
    r1.min(r2).min(r3)
}

/// Radius in feature cells for an object of `w x h` feature cells.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    gaussian_radius_unclamped(w, h, min_overlap).max(MIN_RADIUS)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetConfig {
    pub num_classes: usize,
    pub output_stride: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub min_overlap: f64,
    pub neg_ratio: f64,
}

impl TargetConfig {
    pub fn new(num_classes: usize, output_stride: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            output_stride,
            image_w: image_size,
            image_h: image_size,
            min_overlap: MIN_OVERLAP,
            neg_ratio: NEG_RATIO,
        }
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.image_h / self.output_stride, self.image_w / self.output_stride)
    }
}

/// Regression targets at one object's centre cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterTarget {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    /// Sub-cell position in `[0, 1)`.
    pub offset: [f32; 2],
    /// `(w, h)` in feature cells.
    pub size: [f32; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// `[K, h, w]`, pointwise max of per-object Gaussians.
    pub heatmap: Tensor<f32>,
    pub centers: Vec<CenterTarget>,
    /// Flat heatmap indices of the sampled background cells, ascending.
    pub neg_mask: Vec<usize>,
}

/// Stamps `exp(-(dx^2 + dy^2) / (2 sigma^2))` around `(x, y)` by pointwise max.
pub fn draw_gaussian(plane: &mut [f32], w: usize, h: usize, x: usize, y: usize, radius: f64) {
    let sigma = radius / 3.0;
    let e = radius.ceil() as isize;
    for dy in -e..=e {
        let yy = y as isize + dy;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for dx in -e..=e {
            let xx = x as isize + dx;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() as f32;
            let cell = &mut plane[yy as usize * w + xx as usize];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Encodes `objects`; `neg_seed` drives the background sample.
pub fn encode_targets(objects: &[GroundTruthObject], cfg: &TargetConfig, neg_seed: u64) -> Result<DetectionTargets> {
    let (mh, mw) = cfg.map_size();
    let r = cfg.output_stride as f32;
    let mut heatmap = Tensor::<f32>::zeros(vec![cfg.num_classes, mh, mw]);
    let mut centers = Vec::with_capacity(objects.len());
    for (i, o) in objects.iter().enumerate() {
        if o.class_id >= cfg.num_classes {
            return Err(GlodError::Invalid(format!("object {i}: class {} out of range", o.class_id)));
        }
        let inside = o.cx >= 0.0 && o.cy >= 0.0 && o.cx < cfg.image_w as f32 && o.cy < cfg.image_h as f32;
        if !inside || !o.cx.is_finite() || !o.cy.is_finite() {
            return Err(GlodError::Invalid(format!("object {i}: centre ({}, {}) outside the image", o.cx, o.cy)));
        }
        if !(o.w > 0.0 && o.h > 0.0) {
            return Err(GlodError::Invalid(format!("object {i}: size must be positive")));
        }
        let (fx, fy) = (o.cx / r, o.cy / r);
        let (x, y) = ((fx.floor() as usize).min(mw - 1), (fy.floor() as usize).min(mh - 1));
        let size = [o.w / r, o.h / r];
        let radius = gaussian_radius(size[0] as f64, size[1] as f64, cfg.min_overlap);
        let plane = &mut heatmap.data_mut()[o.class_id * mh * mw..(o.class_id + 1) * mh * mw];
        draw_gaussian(plane, mw, mh, x, y, radius);
        centers.push(CenterTarget { class_id: o.class_id, x, y, offset: [fx - x as f32, fy - y as f32], size });
    }
    let neg_mask = sample_neg_mask(&heatmap, cfg.neg_ratio, neg_seed);
    Ok(DetectionTargets { heatmap, centers, neg_mask })
}

/// `round(ratio * n)` of the `n` pure-background cells, without replacement.
pub fn sample_neg_mask(heatmap: &Tensor<f32>, ratio: f64, seed: u64) -> Vec<usize> {
    let background: Vec<usize> =
        heatmap.data().iter().enumerate().filter(|(_, &v)| v < BACKGROUND_LEVEL).map(|(i, _)| i).collect();
    let k = (ratio * background.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, background.len(), k.min(background.len()))
        .into_iter()
        .map(|i| background[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Seed of the background sample for one image at one step.
pub fn neg_seed(seed: u64, image_id: u64, step: u64) -> u64 {
    seed ^ image_id ^ step
}

impl DetectionTargets {
    pub fn num_objects(&self) -> usize {
        self.centers.len()
    }

    /// Dense maps equal to a perfect prediction: the heatmap itself, and
    /// offsets and sizes written at every centre cell.
    pub fn as_head_output(&self) -> HeadOutput<Tensor<f32>> {
        let s = self.heatmap.shape();
        let (h, w) = (s[1], s[2]);
        let mut offset = Tensor::zeros(vec![2, h, w]);
        let mut size = Tensor::ones(vec![2, h, w]);
        for c in &self.centers {
            for d in 0..2 {
                offset.set(&[d, c.y, c.x], c.offset[d]);
                size.set(&[d, c.y, c.x], c.size[d]);
            }
        }
        HeadOutput { heatmap: self.heatmap.clone(), offset, size }
    }
}
