//! Training objective: penalty-reduced focal loss on the heatmap plus
//! Smooth-L1 on offsets and sizes at object centres.

use glod_tensor::{CustomOp, Graph, Real, Tensor, Var};

use crate::error::{GlodError, Result};
use crate::net::HeadOutput;
use crate::targets::DetectionTargets;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const PROB_CLAMP: f64 = 1e-7;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Cells entering the focal loss, with their background weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FocalCells {
    pub positives: Vec<usize>,
    /// `(flat index, (1 - Y)^beta)`.
    pub negatives: Vec<(usize, f64)>,
    pub normalizer: f64,
}

impl FocalCells {
    /// Positives are cells with `Y == 1`; negatives are the ring
    /// `0 < Y < 1` plus the sampled background cells.
    pub fn from_targets(t: &DetectionTargets, beta: f64) -> Self {
        let y = t.heatmap.data();
        let mut in_neg = vec![false; y.len()];
        for &i in &t.neg_mask {
            in_neg[i] = true;
        }
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (i, &v) in y.iter().enumerate() {
            if v == 1.0 {
                positives.push(i);
            } else if (v > 0.0 && v < 1.0) || in_neg[i] {
                negatives.push((i, (1.0 - v as f64).powf(beta)));
            }
        }
        let n = t.num_objects();
        Self { positives, negatives, normalizer: if n == 0 { 1.0 } else { n as f64 } }
    }
}

fn clamp_p(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Focal loss of probabilities `pred` over `cells`.
pub fn focal_loss_value<T: Real>(pred: &Tensor<T>, cells: &FocalCells, alpha: f64) -> f64 {
    let p = pred.data();
    let mut s = 0.0;
    for &i in &cells.positives {
        let (q, _) = clamp_p(p[i].to_f64().unwrap_or(f64::NAN));
        s += (1.0 - q).powf(alpha) * q.ln();
    }
    for &(i, wt) in &cells.negatives {
        let (q, _) = clamp_p(p[i].to_f64().unwrap_or(f64::NAN));
        s += wt * q.powf(alpha) * (1.0 - q).ln();
    }
    -s / cells.normalizer
}

/// Gradient of [`focal_loss_value`]; zero where the clamp is active.
pub fn focal_loss_grad<T: Real>(pred: &Tensor<T>, cells: &FocalCells, alpha: f64) -> Tensor<T> {
    let p = pred.data();
    let mut g = vec![0.0f64; p.len()];
    for &i in &cells.positives {
        let (q, clamped) = clamp_p(p[i].to_f64().unwrap_or(f64::NAN));
        if !clamped {
            g[i] += -(-alpha * (1.0 - q).powf(alpha - 1.0) * q.ln() + (1.0 - q).powf(alpha) / q);
        }
    }
    for &(i, wt) in &cells.negatives {
        let (q, clamped) = clamp_p(p[i].to_f64().unwrap_or(f64::NAN));
        if !clamped {
            g[i] += -wt * (alpha * q.powf(alpha - 1.0) * (1.0 - q).ln() - q.powf(alpha) / (1.0 - q));
        }
    }
    let n = cells.normalizer;
    Tensor::new(pred.shape().to_vec(), g.into_iter().map(|v| T::lit(v / n)).collect()).expect("same shape")
}

struct FocalOp {
    cells: FocalCells,
    alpha: f64,
}

impl<T: Real> CustomOp<T> for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(focal_loss_grad(inputs[0], &self.cells, self.alpha).scale(grad.item()))]
    }
}

/// Records the focal loss of heatmap probabilities `pred` on the tape.
pub fn focal_loss<T: Real>(g: &mut Graph<T>, pred: Var, cells: FocalCells, alpha: f64) -> Var {
    let value = focal_loss_value(g.value(pred), &cells, alpha);
    g.custom(&[pred], Tensor::scalar(T::lit(value)), Box::new(FocalOp { cells, alpha }))
}

/// Elementwise Smooth-L1 of a difference.
pub fn smooth_l1(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

/// Regression targets: per cell, the flat spatial index and two values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegressionCells {
    pub cells: Vec<(usize, [f64; 2])>,
}

impl RegressionCells {
    pub fn offsets(t: &DetectionTargets) -> Self {
        let w = t.heatmap.shape()[2];
        Self { cells: t.centers.iter().map(|c| (c.y * w + c.x, [c.offset[0] as f64, c.offset[1] as f64])).collect() }
    }

    pub fn sizes(t: &DetectionTargets) -> Self {
        let w = t.heatmap.shape()[2];
        Self { cells: t.centers.iter().map(|c| (c.y * w + c.x, [c.size[0] as f64, c.size[1] as f64])).collect() }
    }
}

/// Mean Smooth-L1 over masked cells and both channels of a `[2, h, w]` map.
pub fn smooth_l1_value<T: Real>(pred: &Tensor<T>, targets: &RegressionCells, beta: f64) -> f64 {
    if targets.cells.is_empty() {
        return 0.0;
    }
    let plane = pred.numel() / 2;
    let p = pred.data();
    let mut s = 0.0;
    for &(i, t) in &targets.cells {
        for d in 0..2 {
            s += smooth_l1(p[d * plane + i].to_f64().unwrap_or(f64::NAN) - t[d], beta);
        }
    }
    s / (2 * targets.cells.len()) as f64
}

struct SmoothL1Op {
    targets: RegressionCells,
    beta: f64,
}

impl<T: Real> CustomOp<T> for SmoothL1Op {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let pred = inputs[0];
        let mut g = vec![T::zero(); pred.numel()];
        let n = self.targets.cells.len();
        if n > 0 {
            let plane = pred.numel() / 2;
            let scale = grad.item().to_f64().unwrap_or(0.0) / (2 * n) as f64;
            for &(i, t) in &self.targets.cells {
                for d in 0..2 {
                    let diff = pred.data()[d * plane + i].to_f64().unwrap_or(f64::NAN) - t[d];
                    g[d * plane + i] += T::lit(smooth_l1_grad(diff, self.beta) * scale);
                }
            }
        }
        vec![Some(Tensor::new(pred.shape().to_vec(), g).expect("same shape"))]
    }
}

pub fn smooth_l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, targets: RegressionCells, beta: f64) -> Var {
    let value = smooth_l1_value(g.value(pred), &targets, beta);
    g.custom(&[pred], Tensor::scalar(T::lit(value)), Box::new(SmoothL1Op { targets, beta }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub off: f64,
    pub size: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, off: 1.0, size: 1.0 }
    }
}

/// Weighted terms as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub off: f64,
    pub size: f64,
}

/// `w_cls L_cls + w_off L_off + w_size L_size` on the tape, plus the
/// weighted per-term values.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    head: &HeadOutput<Var>,
    targets: &DetectionTargets,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if g.shape(head.heatmap) != targets.heatmap.shape() {
        return Err(GlodError::Invalid(format!(
            "heatmap {:?} does not match targets {:?}",
            g.shape(head.heatmap),
            targets.heatmap.shape()
        )));
    }
    let cls = focal_loss(g, head.heatmap, FocalCells::from_targets(targets, FOCAL_BETA), FOCAL_ALPHA);
    let off = smooth_l1_loss(g, head.offset, RegressionCells::offsets(targets), SMOOTH_L1_BETA);
    let size = smooth_l1_loss(g, head.size, RegressionCells::sizes(targets), SMOOTH_L1_BETA);
    let cls = g.scale(cls, T::lit(weights.cls));
    let off = g.scale(off, T::lit(weights.off));
    let size = g.scale(size, T::lit(weights.size));
    let s = g.add(cls, off)?;
    let total = g.add(s, size)?;
    let val = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    let b = LossBreakdown { total: val(total), cls: val(cls), off: val(off), size: val(size) };
    Ok((total, b))
}
