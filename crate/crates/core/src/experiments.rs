//! Overfit check, fusion-block on/off and local-maxima window ablations.

use std::fmt::Write as _;

use crate::data::{generate_scene, scene_seed, split_ids, AugmentConfig, SceneSpec, Split};
use crate::decode::{iou, DecodeConfig, Detection};
use crate::error::Result;
use crate::eval::{detect, evaluate_heads, predict_samples, DecodeMode};
use crate::metrics::{EvalResult, ImageMap};
use crate::net::{Glod, GlodConfig, HeadOutput};
use crate::params::ParamStore;
use crate::targets::GroundTruthObject;
use crate::train::{Sample, StepLog, TrainConfig, Trainer};
use glod_tensor::Tensor;

/// Data, model and schedule shared by both arms of the fusion ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetup {
    pub scenes: usize,
    pub dataset_seed: u64,
    pub spec: SceneSpec,
    pub model: GlodConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl AblationSetup {
    /// 200 scenes of 64x64 pixels holding desk-sized objects (4 to 36
    /// pixels), the toy model, and 1000 steps of two images each.
    pub fn desk() -> Self {
        let mut train = TrainConfig { steps: 1000, micro_batch: 2, accum: 1, cycle_epochs: 12, checkpoint_every: 0, ..TrainConfig::default() };
        train.optim.lr = 4e-3;
        Self {
            scenes: 200,
            dataset_seed: 0,
            spec: SceneSpec::desk(64),
            model: GlodConfig::toy(),
            train,
            decode: DecodeConfig::default(),
        }
    }

    /// Rendered scenes split into train and validation sets.
    pub fn samples(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let ids: Vec<u64> = (0..self.scenes as u64).collect();
        let split = split_ids(&ids, self.dataset_seed);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for &id in &ids {
            let s = generate_scene(scene_seed(self.dataset_seed, id), &self.spec)?;
            let sample = Sample { id, image: s.image, objects: s.objects };
            match split[&id] {
                Split::Train => train.push(sample),
                Split::Val => val.push(sample),
            }
        }
        Ok((train, val))
    }
}

/// A trained model with its validation heads and single-window scores.
pub struct TrainedArm {
    pub model: Glod,
    pub store: ParamStore<f32>,
    pub heads: Vec<HeadOutput<Tensor<f32>>>,
    pub result: EvalResult,
}

/// Trains one arm from `seed` and scores it on `val` at the default window.
pub fn train_arm(setup: &AblationSetup, fusion: bool, seed: u64, train: &[Sample], val: &[Sample]) -> Result<TrainedArm> {
    let model = Glod::new(GlodConfig { fusion, ..setup.model.clone() })?;
    let cfg = TrainConfig { seed, ..setup.train.clone() };
    let mut trainer = Trainer::<f32>::new(model.clone(), cfg.clone(), train.to_vec())?;
    trainer.run(None, |_| {})?;
    let mut store = trainer.store;
    let heads = predict_samples(&model, &mut store, val, &cfg.normalize)?;
    let (result, _) = evaluate_heads(&model, val, &heads, &setup.decode, DecodeMode::Single(setup.decode.p))?;
    Ok(TrainedArm { model, store, heads, result })
}

/// Validation scores of both arms trained from the same seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRun {
    pub seed: u64,
    pub on: EvalResult,
    pub off: EvalResult,
}

impl FusionRun {
    pub fn on_at_least_off(&self) -> (bool, bool) {
        (self.on.map50 >= self.off.map50, self.on.map75 >= self.off.map75)
    }

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6},{:.6}", self.seed, self.on.map50, self.on.map75, self.off.map50, self.off.map75)
    }
}

pub const FUSION_CSV_HEADER: &str = "seed,map50_on,map75_on,map50_off,map75_off";

/// Both arms for one seed; also returns the fusion-on arm for reuse.
pub fn fusion_ablation(setup: &AblationSetup, seed: u64, train: &[Sample], val: &[Sample]) -> Result<(FusionRun, TrainedArm)> {
    let on = train_arm(setup, true, seed, train, val)?;
    let off = train_arm(setup, false, seed, train, val)?;
    Ok((FusionRun { seed, on: on.result.clone(), off: off.result }, on))
}

/// Two desk scenes trained on without augmentation, to check that the
/// model can memorize them.
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitSetup {
    pub images: u64,
    pub dataset_seed: u64,
    pub spec: SceneSpec,
    pub model: GlodConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl OverfitSetup {
    pub fn desk() -> Self {
        let mut train =
            TrainConfig { steps: 300, micro_batch: 2, accum: 1, checkpoint_every: 0, augment: AugmentConfig::disabled(), ..TrainConfig::default() };
        train.optim.lr = 1e-3;
        Self { images: 2, dataset_seed: 7, spec: SceneSpec::desk(128), model: GlodConfig::desk(), train, decode: DecodeConfig::default() }
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.images)
            .map(|id| {
                let s = generate_scene(scene_seed(self.dataset_seed, id), &self.spec)?;
                Ok(Sample { id, image: s.image, objects: s.objects })
            })
            .collect()
    }
}

pub struct OverfitRun {
    pub samples: Vec<Sample>,
    pub logs: Vec<StepLog>,
    pub arm: TrainedArm,
}

impl OverfitRun {
    /// Mean total loss over `window` steps ending at `end` (exclusive).
    pub fn mean_loss(&self, end: usize, window: usize) -> f64 {
        let part = &self.logs[end.saturating_sub(window)..end];
        part.iter().map(|l| l.loss.total).sum::<f64>() / part.len() as f64
    }

    /// Relative drop from the mean of the first ten steps to the mean of the
    /// last ten.
    pub fn loss_drop(&self) -> f64 {
        1.0 - self.mean_loss(self.logs.len(), 10) / self.mean_loss(10, 10)
    }
}

/// Trains on the overfit set and scores the same images.
pub fn overfit(setup: &OverfitSetup) -> Result<OverfitRun> {
    let samples = setup.samples()?;
    let model = Glod::new(setup.model.clone())?;
    let mut trainer = Trainer::<f32>::new(model.clone(), setup.train.clone(), samples.clone())?;
    let logs = trainer.run(None, |_| {})?;
    let mut store = trainer.store;
    let heads = predict_samples(&model, &mut store, &samples, &setup.train.normalize)?;
    let (result, _) = evaluate_heads(&model, &samples, &heads, &setup.decode, DecodeMode::Single(setup.decode.p))?;
    Ok(OverfitRun { samples, logs, arm: TrainedArm { model, store, heads, result } })
}

/// Detections of one window size, or of the merged pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelRow {
    /// `None` for the merged pipeline.
    pub p: Option<usize>,
    /// Retained detections per class, summed over images.
    pub counts: Vec<usize>,
    /// Fraction of ground-truth boxes matched at IoU 0.5.
    pub recall: f64,
}

impl KernelRow {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Share of ground-truth boxes matched one-to-one by a same-class detection
/// at IoU `tau`, detections taken by score descending.
pub fn recall(dets: &ImageMap<Detection>, gts: &ImageMap<GroundTruthObject>, tau: f32) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (id, objects) in gts {
        total += objects.len();
        let mut order: Vec<&Detection> = dets.get(id).map(|v| v.iter().collect()).unwrap_or_default();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; objects.len()];
        for d in order {
            let best = objects
                .iter()
                .enumerate()
                .filter(|(j, o)| !used[*j] && o.class_id == d.class_id)
                .map(|(j, o)| (j, iou(&d.bbox, &o.bbox())))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, v)) = best {
                if v >= tau {
                    used[j] = true;
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Per-window rows and the merged pipeline over `cfg.merge_ps`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSweep {
    pub rows: Vec<KernelRow>,
    pub merged: KernelRow,
}

pub fn kernel_sweep(
    num_classes: usize,
    samples: &[Sample],
    heads: &[HeadOutput<Tensor<f32>>],
    cfg: &DecodeConfig,
    ps: &[usize],
) -> KernelSweep {
    let gts: ImageMap<GroundTruthObject> = samples.iter().map(|s| (s.id, s.objects.clone())).collect();
    let row = |p: Option<usize>, mode: DecodeMode| {
        let dets: ImageMap<Detection> = samples.iter().zip(heads).map(|(s, h)| (s.id, detect(h, cfg, mode))).collect();
        let mut counts = vec![0; num_classes];
        for d in dets.values().flatten() {
            counts[d.class_id] += 1;
        }
        KernelRow { p, counts, recall: recall(&dets, &gts, 0.5) }
    };
    KernelSweep {
        rows: ps.iter().map(|&p| row(Some(p), DecodeMode::Single(p))).collect(),
        merged: row(None, DecodeMode::Merged),
    }
}

/// `p,<class names...>,total,recall50`; a merged row is labelled `merged`.
pub fn kernel_csv(rows: &[KernelRow], classes: &[String]) -> String {
    let mut s = format!("p,{},total,recall50\n", classes.join(","));
    for r in rows {
        let label = r.p.map_or("merged".to_string(), |p| p.to_string());
        let counts: Vec<String> = r.counts.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{label},{},{},{:.6}", counts.join(","), r.total(), r.recall);
    }
    s
}
