//! Running a trained model over a set of images and scoring the result.

use glod_tensor::{Real, Tensor};

use crate::data::{normalize, NormalizeConfig};
use crate::decode::{decode_at, multi_kernel_decode, nms, DecodeConfig, Detection};
use crate::error::Result;
use crate::metrics::{evaluate, EvalResult, ImageMap, PsnrAccumulator};
use crate::net::{Glod, HeadOutput};
use crate::params::ParamStore;
use crate::targets::{encode_targets, TargetConfig};
use crate::train::Sample;

/// How head outputs become detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Peaks with window `2p + 1`, then NMS.
    Single(usize),
    /// Union over the configured kernel sizes, then NMS.
    Merged,
}

pub fn detect(head: &HeadOutput<Tensor<f32>>, cfg: &DecodeConfig, mode: DecodeMode) -> Vec<Detection> {
    match mode {
        DecodeMode::Single(p) => nms(&decode_at(head, cfg, p), cfg.nms_iou),
        DecodeMode::Merged => multi_kernel_decode(head, cfg),
    }
}

/// Eval-mode head outputs for every sample, in order.
pub fn predict_samples<T: Real>(
    model: &Glod,
    store: &mut ParamStore<T>,
    samples: &[Sample],
    norm: &NormalizeConfig,
) -> Result<Vec<HeadOutput<Tensor<f32>>>> {
    samples
        .iter()
        .map(|s| {
            let x = normalize(&s.image, norm)?.cast::<T>();
            Ok(model.predict(store, &x)?.cast::<f32>())
        })
        .collect()
}

/// Detections and metrics for precomputed head outputs.
pub fn evaluate_heads(
    model: &Glod,
    samples: &[Sample],
    heads: &[HeadOutput<Tensor<f32>>],
    cfg: &DecodeConfig,
    mode: DecodeMode,
) -> Result<(EvalResult, ImageMap<Detection>)> {
    let mc = &model.config;
    let cfg = DecodeConfig { output_stride: mc.output_stride, ..cfg.clone() };
    let tcfg = TargetConfig::new(mc.num_classes, mc.output_stride, mc.image_size);
    let mut dets = ImageMap::new();
    let mut gts = ImageMap::new();
    let mut psnr = PsnrAccumulator::new(mc.num_classes);
    for (s, head) in samples.iter().zip(heads) {
        let targets = encode_targets(&s.objects, &tcfg, 0)?;
        psnr.add(&head.heatmap, &targets.heatmap)?;
        dets.insert(s.id, detect(head, &cfg, mode));
        gts.insert(s.id, s.objects.clone());
    }
    Ok((evaluate(&dets, &gts, &psnr, mc.num_classes)?, dets))
}

/// Predicts and scores `samples` in one go.
pub fn evaluate_samples<T: Real>(
    model: &Glod,
    store: &mut ParamStore<T>,
    samples: &[Sample],
    norm: &NormalizeConfig,
    cfg: &DecodeConfig,
    mode: DecodeMode,
) -> Result<(EvalResult, ImageMap<Detection>)> {
    let heads = predict_samples(model, store, samples, norm)?;
    evaluate_heads(model, samples, &heads, cfg, mode)
}
