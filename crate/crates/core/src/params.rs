//! Named parameter storage and the per-forward context that binds stored
//! tensors to graph leaves.

use glod_tensor::ops::{ConvSpec, RunningStats};
use glod_tensor::{Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GlodError, Result};

/// Learnable parameters plus non-learnable buffers (batch-norm running
/// statistics), both keyed by dotted path and kept in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new(), buffers: IndexMap::new() }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// How a parameter is filled on first use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// He-normal over `fan_in` inputs.
    Kaiming { fan_in: usize },
}

impl Init {
    fn build<T: Real>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::Const(v) => Tensor::full(shape.to_vec(), T::lit(v)),
            Init::Normal(std) => normal(shape, std, rng),
            Init::Kaiming { fan_in } => normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        }
    }
}

fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed by one train-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BnStat<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// FNV-1a over the parameter path, so each parameter's initial values
/// depend only on the seed and its own name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// State for one forward pass: the tape, the parameter source, and the
/// batch statistics produced along the way.
///
/// With an init seed, parameters missing from the store are created on
/// first use; running a forward once therefore builds a model. Two models
/// built from the same seed agree on every parameter path they share.
pub struct Ctx<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    init_seed: Option<u64>,
    frozen_bn: bool,
    bn_stats: Vec<BnStat<T>>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Self { graph: Graph::new(), store, mode, init_seed: None, frozen_bn: false, bn_stats: Vec::new() }
    }

    /// Context that initializes missing parameters from `seed`.
    pub fn initializing(store: &'s mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self { init_seed: Some(seed), ..Self::new(store, mode) }
    }

    /// In train mode, normalize with the running statistics instead of the
    /// sample's own and leave them untouched. Gradients still reach the
    /// affine parameters and the input.
    pub fn with_frozen_bn(mut self, frozen: bool) -> Self {
        self.frozen_bn = frozen;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStat<T>> {
        std::mem::take(&mut self.bn_stats)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.input(t)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    /// Graph leaf for parameter `name`, created with `init` if absent.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.graph.param_var(name) {
            return Ok(v);
        }
        match self.store.param(name) {
            Some(t) if t.shape() != shape => {
                return Err(GlodError::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    actual: t.shape().to_vec(),
                })
            }
            Some(_) => {}
            None => {
                let seed = self.init_seed.ok_or_else(|| GlodError::MissingParam(name.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
                self.store.insert_param(name, init.build(shape, &mut rng));
            }
        }
        let store = &*self.store;
        Ok(self.graph.param(name, || store.param(name).expect("present").clone()))
    }

    fn buffer_or_init(&mut self, name: &str, c: usize, fill: f64) -> Result<Tensor<T>> {
        match self.store.buffer(name) {
            Some(t) if t.numel() == c => Ok(t.clone()),
            Some(t) => Err(GlodError::ParamShape { name: name.into(), expected: vec![c], actual: t.shape().to_vec() }),
            None if self.init_seed.is_some() => {
                let t = Tensor::full(vec![c], T::lit(fill));
                self.store.insert_buffer(name, t.clone());
                Ok(t)
            }
            None => Err(GlodError::MissingParam(name.to_string())),
        }
    }

    /// Convolution with weight `{name}.weight` and optional `{name}.bias`.
    pub fn conv(&mut self, name: &str, x: Var, cout: usize, spec: ConvSpec, bias: Option<Init>) -> Result<Var> {
        let cin = self.graph.shape(x)[0];
        let cpg = cin / spec.groups;
        let w = self.param(
            &format!("{name}.weight"),
            &[cout, cpg, spec.kernel_h, spec.kernel_w],
            Init::Kaiming { fan_in: cpg * spec.kernel_h * spec.kernel_w },
        )?;
        let b = match bias {
            Some(init) => Some(self.param(&format!("{name}.bias"), &[cout], init)?),
            None => None,
        };
        Ok(self.graph.conv2d(x, w, b, spec)?)
    }

    /// Batch norm over one `[C, H, W]` sample. Train mode records the
    /// statistics for a later running-average update.
    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let c = self.graph.shape(x)[0];
        let gamma = self.param(&format!("{name}.weight"), &[c], Init::Ones)?;
        let beta = self.param(&format!("{name}.bias"), &[c], Init::Zeros)?;
        let rm = self.buffer_or_init(&format!("{name}.running_mean"), c, 0.0)?;
        let rv = self.buffer_or_init(&format!("{name}.running_var"), c, 1.0)?;
        let eps = T::lit(BN_EPS);
        match self.mode {
            Mode::Train if !self.frozen_bn => {
                let count = self.graph.value(x).numel() / c;
                let (y, mean, var) = self.graph.batch_norm_train(x, gamma, beta, eps)?;
                self.bn_stats.push(BnStat { name: name.to_string(), mean, var, count });
                Ok(y)
            }
            _ => Ok(self.graph.batch_norm_eval(x, gamma, beta, &rm, &rv, eps)?),
        }
    }

    /// Affine map over the last axis with weight `[din, dout]`.
    pub fn linear(&mut self, name: &str, x: Var, dout: usize, bias: bool) -> Result<Var> {
        let din = *self.graph.shape(x).last().expect("rank >= 1");
        let w = self.param(&format!("{name}.weight"), &[din, dout], Init::Normal(0.02))?;
        let b = if bias { Some(self.param(&format!("{name}.bias"), &[dout], Init::Zeros)?) } else { None };
        Ok(self.graph.linear(x, w, b)?)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let d = *self.graph.shape(x).last().expect("rank >= 1");
        let gamma = self.param(&format!("{name}.weight"), &[d], Init::Ones)?;
        let beta = self.param(&format!("{name}.bias"), &[d], Init::Zeros)?;
        Ok(self.graph.layer_norm(x, gamma, beta, T::lit(LN_EPS))?)
    }
}

/// Folds recorded batch statistics into the stored running averages.
pub fn apply_bn_stats<T: Real>(store: &mut ParamStore<T>, stats: &[BnStat<T>]) {
    for s in stats {
        let (mk, vk) = (format!("{}.running_mean", s.name), format!("{}.running_var", s.name));
        let (Some(mean), Some(var)) = (store.buffer(&mk), store.buffer(&vk)) else { continue };
        let mut running = RunningStats { mean: mean.clone(), var: var.clone(), momentum: T::lit(BN_MOMENTUM) };
        running.update(&s.mean, &s.var, s.count);
        store.insert_buffer(mk, running.mean);
        store.insert_buffer(vk, running.var);
    }
}
