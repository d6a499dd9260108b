//! Synthetic aerial scenes, augmentation, normalization and dataset files.

mod augment;
mod io;
mod synth;

pub use augment::{augment, equalize, flip_horizontal, flip_vertical, greyscale, solarize, solarize_value, AugmentConfig};
pub use io::{
    generate_dataset, read_annotations, read_ppm, read_split, split_ids, write_annotations, write_ppm, write_split,
    Dataset, Split, TRAIN_FRACTION,
};
pub use synth::{generate_scene, scene_seed, ClassSpec, Placement, Scene, SceneSpec};

use glod_tensor::Tensor;

use crate::error::{GlodError, Result};

/// Per-channel standardization constants applied after scaling to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeConfig {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormalizeConfig {
    /// ImageNet statistics.
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

fn check3(image: &Tensor<f32>) -> Result<usize> {
    match image.shape() {
        [3, h, w] => Ok(h * w),
        s => Err(GlodError::Invalid(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// `(x / 255 - mean) / std` per channel.
pub fn normalize(image: &Tensor<f32>, cfg: &NormalizeConfig) -> Result<Tensor<f32>> {
    let plane = check3(image)?;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v / 255.0 - cfg.mean[c]) / cfg.std[c];
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &Tensor<f32>, cfg: &NormalizeConfig) -> Result<Tensor<f32>> {
    let plane = check3(image)?;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v * cfg.std[c] + cfg.mean[c]) * 255.0;
    }
    Ok(out)
}
