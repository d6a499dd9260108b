//! Photometric and geometric augmentation on integer-valued `[3, H, W]`
//! images. Flips also move the boxes.

use glod_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::targets::GroundTruthObject;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub greyscale: f64,
    pub solarize: f64,
    pub solarize_threshold: f32,
    pub equalize: f64,
    pub hflip: f64,
    pub vflip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { greyscale: 0.25, solarize: 0.25, solarize_threshold: 192.0, equalize: 0.25, hflip: 0.25, vflip: 0.25 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { greyscale: 0.0, solarize: 0.0, solarize_threshold: 192.0, equalize: 0.0, hflip: 0.0, vflip: 0.0 }
    }
}

fn dims(image: &Tensor<f32>) -> (usize, usize, usize) {
    image.dims3("augment").expect("augmentation expects a [C, H, W] image")
}

/// Replaces every channel with the rounded luma of the RGB pixel.
pub fn greyscale(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    if c != 3 {
        return image.clone();
    }
    let plane = h * w;
    let d = image.data();
    let mut out = image.clone();
    for i in 0..plane {
        let y = (0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]).round().clamp(0.0, 255.0);
        for ch in 0..3 {
            out.data_mut()[ch * plane + i] = y;
        }
    }
    out
}

pub fn solarize_value(v: f32, threshold: f32) -> f32 {
    if v < threshold {
        v
    } else {
        255.0 - v
    }
}

/// Inverts every value at or above `threshold`.
pub fn solarize(image: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    image.map(|v| solarize_value(v, threshold))
}

/// Per-channel histogram equalization over 256 integer levels.
pub fn equalize(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let plane = h * w;
    let mut out = image.clone();
    for ch in 0..c {
        let slice = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        let mut hist = [0usize; 256];
        for &v in slice.iter() {
            hist[v.round().clamp(0.0, 255.0) as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &n) in hist.iter().enumerate() {
            acc += n;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&n| n > 0).unwrap_or(0);
        if plane == cdf_min {
            continue;
        }
        let denom = (plane - cdf_min) as f64;
        for v in slice.iter_mut() {
            let k = v.round().clamp(0.0, 255.0) as usize;
            *v = ((cdf[k] - cdf_min) as f64 / denom * 255.0).round() as f32;
        }
    }
    out
}

pub fn flip_horizontal(image: &Tensor<f32>, objects: &[GroundTruthObject]) -> (Tensor<f32>, Vec<GroundTruthObject>) {
    let (c, h, w) = dims(image);
    let out = Tensor::from_fn(vec![c, h, w], |i| {
        let x = i % w;
        image.data()[i - x + (w - 1 - x)]
    });
    let objs = objects.iter().map(|o| GroundTruthObject { cx: w as f32 - o.cx, ..*o }).collect();
    (out, objs)
}

pub fn flip_vertical(image: &Tensor<f32>, objects: &[GroundTruthObject]) -> (Tensor<f32>, Vec<GroundTruthObject>) {
    let (c, h, w) = dims(image);
    let out = Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        image.data()[ch * h * w + (h - 1 - y) * w + x]
    });
    let objs = objects.iter().map(|o| GroundTruthObject { cy: h as f32 - o.cy, ..*o }).collect();
    (out, objs)
}

/// Applies each enabled transform independently with its probability, in a
/// fixed order, using a generator seeded by `seed`.
pub fn augment(
    image: &Tensor<f32>,
    objects: &[GroundTruthObject],
    cfg: &AugmentConfig,
    seed: u64,
) -> (Tensor<f32>, Vec<GroundTruthObject>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    let mut objs = objects.to_vec();
    let mut coin = |p: f64| p > 0.0 && rng.gen_bool(p.min(1.0));
    if coin(cfg.greyscale) {
        img = greyscale(&img);
    }
    if coin(cfg.solarize) {
        img = solarize(&img, cfg.solarize_threshold);
    }
    if coin(cfg.equalize) {
        img = equalize(&img);
    }
    if coin(cfg.hflip) {
        (img, objs) = flip_horizontal(&img, &objs);
    }
    if coin(cfg.vflip) {
        (img, objs) = flip_vertical(&img, &objs);
    }
    (img, objs)
}
