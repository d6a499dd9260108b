/// Cosine annealing from `lr_max` to `lr_min` over `steps_per_cycle`
/// steps, restarting at every cycle boundary.
pub fn cosine_warm_restart_lr(step: usize, steps_per_cycle: usize, lr_max: f64, lr_min: f64) -> f64 {
    let period = steps_per_cycle.max(1);
    let t = (step % period) as f64 / period as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Steps in one cycle of `cycle_epochs` epochs over `train_images` images.
pub fn steps_per_cycle(cycle_epochs: usize, train_images: usize, effective_batch: usize) -> usize {
    (cycle_epochs * train_images.div_ceil(effective_batch.max(1))).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_warm_restart_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert_eq!(cosine_warm_restart_lr(100, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_warm_restart_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn epoch_conversion() {
        assert_eq!(steps_per_cycle(10, 170, 8), 220);
        assert_eq!(steps_per_cycle(10, 2, 8), 10);
    }
}
