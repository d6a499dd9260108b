use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use glod_tensor::{Real, Tensor};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{AdamW, AdamWConfig};
use super::schedule::{cosine_warm_restart_lr, steps_per_cycle};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, normalize, AugmentConfig, NormalizeConfig};
use crate::error::{GlodError, Result};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::net::Glod;
use crate::params::{apply_bn_stats, Ctx, Mode, ParamStore};
use crate::targets::{encode_targets, neg_seed, GroundTruthObject, TargetConfig, NEG_RATIO};

pub const LOG_HEADER: &str = "step,lr,loss_total,loss_cls,loss_off,loss_size";
pub const CHECKPOINT_FILE: &str = "checkpoint.gckpt";
pub const LOG_FILE: &str = "log.csv";

/// One training image with pixel values in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Tensor<f32>,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub micro_batch: usize,
    pub accum: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub optim: AdamWConfig,
    pub cycle_epochs: usize,
    pub min_lr_factor: f64,
    pub augment: AugmentConfig,
    pub normalize: NormalizeConfig,
    pub loss_weights: LossWeights,
    pub neg_ratio: f64,
    /// Fraction of `steps` after which batch norm normalizes with its
    /// running statistics, so the last stretch of training sees the same
    /// normalization as inference. 1 never freezes.
    pub freeze_bn_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            micro_batch: 2,
            accum: 4,
            seed: 0,
            checkpoint_every: 500,
            optim: AdamWConfig::default(),
            cycle_epochs: 10,
            min_lr_factor: 0.0,
            augment: AugmentConfig::default(),
            normalize: NormalizeConfig::default(),
            loss_weights: LossWeights::default(),
            neg_ratio: NEG_RATIO,
            freeze_bn_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum
    }

    pub fn freeze_bn_step(&self) -> usize {
        (self.freeze_bn_fraction * self.steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accum == 0 || self.cycle_epochs == 0 {
            return Err(GlodError::Config("micro-batch, accumulation and cycle length must be positive".into()));
        }
        if !(self.optim.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_factor) {
            return Err(GlodError::Config("learning rate must be positive and the min factor in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.freeze_bn_fraction) {
            return Err(GlodError::Config("batch-norm freeze fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Index of the sample drawn at global position `position`: a fresh seeded
/// permutation of `0..n` per epoch, so the order is a pure function of
/// `(seed, position)`.
pub fn sample_order(seed: u64, n: usize, position: usize) -> usize {
    let epoch = (position / n) as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    perm[position % n]
}

fn augment_seed(seed: u64, position: usize) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA5A5
}

/// Logged values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.step, self.lr, l.total, l.cls, l.off, l.size)
    }
}

pub struct Trainer<T: Real> {
    pub model: Glod,
    pub config: TrainConfig,
    pub store: ParamStore<T>,
    pub optim: AdamW<T>,
    /// Completed optimizer steps.
    pub step: usize,
    samples: Vec<Sample>,
    targets: TargetConfig,
    cycle: usize,
}

impl<T: Real> Trainer<T> {
    /// Fresh model initialized from the training seed.
    pub fn new(model: Glod, config: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        let store = model.init(config.seed)?;
        Self::with_state(model, config, samples, store, None, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint<T>, config: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        let model = Glod::new(ck.config()?)?;
        let step: usize = ck
            .meta_value("step")
            .ok_or_else(|| GlodError::Checkpoint("missing `step` entry".into()))?
            .parse()
            .map_err(|_| GlodError::Checkpoint("malformed `step` entry".into()))?;
        let optim = AdamW::restore(config.optim, step as u64, ck.tensors.iter());
        Self::with_state(model, config, samples, ck.store(), Some(optim), step)
    }

    fn with_state(
        model: Glod,
        config: TrainConfig,
        samples: Vec<Sample>,
        store: ParamStore<T>,
        optim: Option<AdamW<T>>,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(GlodError::Invalid("no training images".into()));
        }
        let mc = &model.config;
        let side = mc.image_size;
        if let Some(s) = samples.iter().find(|s| s.image.shape() != [mc.encoder.in_channels, side, side]) {
            return Err(GlodError::Invalid(format!(
                "image {} has shape {:?}, model expects [{}, {side}, {side}]",
                s.id,
                s.image.shape(),
                mc.encoder.in_channels
            )));
        }
        let targets = TargetConfig { neg_ratio: config.neg_ratio, ..TargetConfig::new(mc.num_classes, mc.output_stride, side) };
        let cycle = steps_per_cycle(config.cycle_epochs, samples.len(), config.effective_batch());
        let optim = optim.unwrap_or_else(|| AdamW::new(config.optim));
        Ok(Self { model, config, store, optim, step, samples, targets, cycle })
    }

    pub fn steps_per_cycle(&self) -> usize {
        self.cycle
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let max = self.config.optim.lr;
        cosine_warm_restart_lr(step, self.cycle, max, max * self.config.min_lr_factor)
    }

    /// Loss and parameter gradients of the sample at global `position`;
    /// batch statistics are folded into the running averages.
    fn sample_gradients(&mut self, position: usize) -> Result<(LossBreakdown, Vec<(String, Tensor<T>)>)> {
        let cfg = &self.config;
        let sample = &self.samples[sample_order(cfg.seed, self.samples.len(), position)];
        let (image, objects) = augment(&sample.image, &sample.objects, &cfg.augment, augment_seed(cfg.seed, position));
        let image = normalize(&image, &cfg.normalize)?.cast::<T>();
        let targets = encode_targets(&objects, &self.targets, neg_seed(cfg.seed, sample.id, self.step as u64))?;
        let weights = cfg.loss_weights;
        let frozen = self.step >= cfg.freeze_bn_step();
        let mut cx = Ctx::new(&mut self.store, Mode::Train).with_frozen_bn(frozen);
        let x = cx.constant(image);
        let head = self.model.forward(&mut cx, x)?;
        let (loss, breakdown) = total_loss(&mut cx.graph, &head, &targets, weights)?;
        if !breakdown.total.is_finite() {
            return Err(GlodError::NonFiniteLoss(self.step));
        }
        let grads = cx.graph.backward(loss)?.into_params();
        let stats = cx.take_bn_stats();
        apply_bn_stats(&mut self.store, &stats);
        Ok((breakdown, grads))
    }

    /// Accumulates `micro_batch * accum` per-sample gradients, averages
    /// them, and applies one optimizer update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let (micro, accum) = (self.config.micro_batch, self.config.accum);
        let scale = 1.0 / (micro * accum) as f64;
        let mut acc: IndexMap<String, Tensor<T>> = IndexMap::new();
        let mut loss = LossBreakdown::default();
        for a in 0..accum {
            for j in 0..micro {
                let position = (self.step * accum + a) * micro + j;
                let (b, grads) = self.sample_gradients(position)?;
                loss.total += b.total * scale;
                loss.cls += b.cls * scale;
                loss.off += b.off * scale;
                loss.size += b.size * scale;
                for (name, g) in grads {
                    let g = g.scale(T::lit(scale));
                    match acc.get_mut(&name) {
                        Some(t) => t.add_assign(&g)?,
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
        }
        let lr = self.lr_at(self.step);
        self.optim.step(&mut self.store, &acc, lr)?;
        let log = StepLog { step: self.step, lr, loss };
        self.step += 1;
        Ok(log)
    }

    /// Model, running statistics, optimizer moments and step counter.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_model(&self.model.config, &self.store, &format!("step={}\n", self.step));
        for (k, t) in self.optim.state() {
            ck.tensors.insert(k, t.clone());
        }
        ck
    }

    /// Trains until `config.steps` completed steps. With `out`, appends to
    /// `out/log.csv` and saves `out/checkpoint.gckpt` on cadence and at the
    /// end; a failing step leaves the last saved checkpoint in place.
    pub fn run(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| GlodError::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let fresh = self.step == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| GlodError::io(&path, e))?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}").map_err(|e| GlodError::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let log = self.train_step()?;
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", log.csv_line()).map_err(|e| GlodError::io(&*path, e))?;
            }
            on_step(&log);
            logs.push(log);
            let every = self.config.checkpoint_every;
            let due = (every > 0 && self.step % every == 0) || self.step == self.config.steps;
            if let (Some(dir), true) = (out, due) {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(logs)
    }
}
