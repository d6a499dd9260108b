//! Batch normalization over the spatial extent of a `[C, H, W]` map, and
//! layer normalization over the last axis.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{debug_check_finite, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running mean/variance tracked by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: T,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(vec![channels]), var: Tensor::ones(vec![channels]), momentum: T::lit(0.1) }
    }

    /// Blends in one batch's statistics. `var` is the biased batch variance
    /// over `n` samples; the running estimate stores the unbiased one.
    pub fn update(&mut self, mean: &[T], var: &[T], n: usize) {
        let m = self.momentum;
        let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_params<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    for (t, dim) in [(gamma, "gamma length"), (beta, "beta length")] {
        if t.numel() != c {
            return Err(TensorError::DimMismatch { op: "batch_norm", dim, expected: c, actual: t.numel() });
        }
    }
    Ok(())
}

/// Normalizes each channel. In train mode batch statistics are used; with
/// `eval_stats` given (eval mode) the provided running statistics are used.
pub fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eval_stats: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (c, h, w) = input.dims3("batch_norm")?;
    check_params(c, gamma, beta)?;
    if eps <= T::zero() {
        return Err(crate::error::invalid("batch_norm", "eps must be positive"));
    }
    let n = h * w;
    let nf = T::lit(n as f64);
    let mut out = vec![T::zero(); input.numel()];
    let mut xhat = vec![T::zero(); input.numel()];
    let mut cache = BnCache { xhat: Vec::new(), inv_std: vec![T::zero(); c], mean: vec![T::zero(); c], var: vec![T::zero(); c] };
    for ch in 0..c {
        let x = input.channel(ch);
        let (mean, var) = match eval_stats {
            Some((rm, rv)) => {
                if rm.numel() != c || rv.numel() != c {
                    return Err(TensorError::DimMismatch { op: "batch_norm", dim: "running stats length", expected: c, actual: rm.numel() });
                }
                (rm.data()[ch], rv.data()[ch])
            }
            None => {
                let mean = x.iter().copied().sum::<T>() / nf;
                let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                (mean, var)
            }
        };
        let inv = T::one() / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let base = ch * n;
        for (i, &v) in x.iter().enumerate() {
            let xh = (v - mean) * inv;
            xhat[base + i] = xh;
            out[base + i] = g * xh + b;
        }
        cache.inv_std[ch] = inv;
        cache.mean[ch] = mean;
        cache.var[ch] = var;
    }
    cache.xhat = xhat;
    debug_check_finite("batch_norm", input.all_finite(), &out);
    Ok((Tensor::from_parts(input.shape().to_vec(), out), cache))
}

/// Batch norm in either mode; train mode also folds the batch statistics
/// into `running`.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: NormMode,
    eps: T,
) -> Result<Tensor<T>> {
    match mode {
        NormMode::Eval => Ok(batch_norm_forward(input, gamma, beta, Some((&running.mean, &running.var)), eps)?.0),
        NormMode::Train => {
            let (out, cache) = batch_norm_forward(input, gamma, beta, None, eps)?;
            let (_, h, w) = input.dims3("batch_norm")?;
            running.update(&cache.mean, &cache.var, h * w);
            Ok(out)
        }
    }
}

/// Gradients `(input, gamma, beta)` of batch norm.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    train: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let n = grad_out.numel() / c;
    let nf = T::lit(n as f64);
    let mut dx = vec![T::zero(); grad_out.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let go = grad_out.channel(ch);
        let xh = &cache.xhat[ch * n..(ch + 1) * n];
        let sum_dy: T = go.iter().copied().sum();
        let sum_dy_xh: T = go.iter().zip(xh).map(|(&d, &x)| d * x).sum();
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let g = gamma.data()[ch];
        let inv = cache.inv_std[ch];
        let dst = &mut dx[ch * n..(ch + 1) * n];
        if train {
            let k = g * inv / nf;
            for i in 0..n {
                dst[i] = k * (nf * go[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        } else {
            for i in 0..n {
                dst[i] = go[i] * g * inv;
            }
        }
    }
    (
        Tensor::from_parts(grad_out.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Layer norm over the last axis. Returns the output plus `(xhat, inv_std)`.
pub fn layer_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = *input.shape().last().ok_or(TensorError::Rank { op: "layer_norm", expected: 1, shape: vec![] })?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(TensorError::DimMismatch { op: "layer_norm", dim: "normalized dim", expected: d, actual: gamma.numel() });
    }
    let df = T::lit(d as f64);
    let rows = input.numel() / d;
    let mut out = vec![T::zero(); input.numel()];
    let mut xhat = vec![T::zero(); input.numel()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let x = &input.data()[r * d..(r + 1) * d];
        let mean = x.iter().copied().sum::<T>() / df;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for i in 0..d {
            let xh = (x[i] - mean) * inv;
            xhat[r * d + i] = xh;
            out[r * d + i] = gamma.data()[i] * xh + beta.data()[i];
        }
    }
    debug_check_finite("layer_norm", input.all_finite(), &out);
    Ok((Tensor::from_parts(input.shape().to_vec(), out), xhat, inv_std))
}

pub fn layer_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let df = T::lit(d as f64);
    let rows = grad_out.numel() / d;
    let mut dx = vec![T::zero(); grad_out.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxh = vec![T::zero(); d];
    for r in 0..rows {
        let go = &grad_out.data()[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dgamma[i] += go[i] * xh[i];
            dbeta[i] += go[i];
            dxh[i] = go[i] * gamma.data()[i];
        }
        let s1: T = dxh.iter().copied().sum();
        let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let k = inv_std[r] / df;
        for i in 0..d {
            dx[r * d + i] = k * (df * dxh[i] - s1 - xh[i] * s2);
        }
    }
    (
        Tensor::from_parts(grad_out.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::full(vec![2, 3, 3], 4.0);
        let mut rs = RunningStats::new(2);
        let y = batch_norm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), &mut rs, NormMode::Train, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_value_channel() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 2], &[0.0, 2.0]).unwrap();
        let mut rs = RunningStats::new(1);
        let eps = 1e-5;
        let y = batch_norm(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), &mut rs, NormMode::Train, eps).unwrap();
        let k = 1.0 / (1.0f64 + eps).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-12);
        assert!((y.data()[1] - k).abs() < 1e-12);
        // running stats move 10% of the way toward (1, unbiased var 2)
        assert!((rs.mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((rs.var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::full(vec![1, 1, 1], 1.0);
        let mut rs = RunningStats::new(1);
        let y = batch_norm(&x, &Tensor::full(vec![1], 2.0), &Tensor::full(vec![1], 3.0), &mut rs, NormMode::Eval, 1e-12).unwrap();
        assert!((y.data()[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros(vec![3, 2, 2]);
        let mut rs = RunningStats::new(3);
        let err = batch_norm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![3]), &mut rs, NormMode::Train, 1e-5).unwrap_err();
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 2]);
        let mut rs = RunningStats::new(1);
        assert!(batch_norm(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), &mut rs, NormMode::Train, 0.0).is_err());
    }
}
