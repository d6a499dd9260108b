use glod_tensor::{Real, Tensor};
use indexmap::IndexMap;

use crate::error::{GlodError, Result};
use crate::params::ParamStore;

pub const OPTIM_M_PREFIX: &str = "optim.m.";
pub const OPTIM_V_PREFIX: &str = "optim.v.";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moments are created lazily per
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update with learning rate `lr`. Parameters without an entry in
    /// `grads` see a zero gradient. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store.param(name).ok_or_else(|| GlodError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(GlodError::ParamShape { name: name.clone(), expected: p.shape().to_vec(), actual: g.shape().to_vec() });
            }
            if !g.all_finite() {
                return Err(GlodError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(c.eps), T::lit(lr * c.weight_decay));
        for (name, p) in store.params_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let old = p.data()[i];
                p.data_mut()[i] = old - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * old;
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `optim.m.<param>` / `optim.v.<param>`.
    pub fn state(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        let m = self.m.iter().map(|(k, t)| (format!("{OPTIM_M_PREFIX}{k}"), t));
        let v = self.v.iter().map(|(k, t)| (format!("{OPTIM_V_PREFIX}{k}"), t));
        m.chain(v)
    }

    /// Rebuilds the optimizer from saved moments.
    pub fn restore<'a>(
        config: AdamWConfig,
        step: u64,
        entries: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>,
    ) -> Self
    where
        T: 'a,
    {
        let mut opt = Self::new(config);
        opt.step = step;
        for (k, t) in entries {
            if let Some(name) = k.strip_prefix(OPTIM_M_PREFIX) {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(OPTIM_V_PREFIX) {
                opt.v.insert(name.to_string(), t.clone());
            }
        }
        opt
    }
}
