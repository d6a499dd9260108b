//! Average precision at an IoU threshold, mean AP across classes, and
//! heatmap PSNR.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use glod_tensor::{Real, Tensor};

use crate::decode::{iou, Detection};
use crate::error::{GlodError, Result};
use crate::targets::GroundTruthObject;

/// PSNR reported when prediction and target agree exactly.
pub const PSNR_CAP_DB: f64 = 100.0;

/// One detection tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image_id: u64,
    pub score: f32,
    pub bbox: [f32; 4],
}

/// All-point interpolated AP for one class. Detections are visited by score
/// descending and matched greedily to the unmatched ground truth box of the
/// same image with the highest IoU, if that IoU reaches `tau`. Returns
/// `None` without ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[(u64, [f32; 4])], tau: f32) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f32)> = None;
        for (j, (img, g)) in gts.iter().enumerate() {
            if *img != d.image_id || matched[j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= tau => {
                matched[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(all_point_ap(&recall, &precision))
}

/// Area under the monotone precision envelope.
pub fn all_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// Per-image detections and ground truth.
pub type ImageMap<V> = BTreeMap<u64, Vec<V>>;

fn per_class(
    dets: &ImageMap<Detection>,
    gts: &ImageMap<GroundTruthObject>,
    class: usize,
) -> (Vec<ScoredBox>, Vec<(u64, [f32; 4])>) {
    let d = dets
        .iter()
        .flat_map(|(&id, v)| {
            v.iter().filter(move |d| d.class_id == class).map(move |d| ScoredBox { image_id: id, score: d.score, bbox: d.bbox })
        })
        .collect();
    let g = gts
        .iter()
        .flat_map(|(&id, v)| v.iter().filter(move |o| o.class_id == class).map(move |o| (id, o.bbox())))
        .collect();
    (d, g)
}

/// Per-class AP at `tau` for classes `0..num_classes`.
pub fn class_aps(
    dets: &ImageMap<Detection>,
    gts: &ImageMap<GroundTruthObject>,
    num_classes: usize,
    tau: f32,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let (d, g) = per_class(dets, gts, c);
            average_precision(&d, &g, tau)
        })
        .collect()
}

/// Unweighted mean AP over classes present in the ground truth.
pub fn map_at(
    dets: &ImageMap<Detection>,
    gts: &ImageMap<GroundTruthObject>,
    num_classes: usize,
    tau: f32,
) -> Result<f64> {
    mean_present(&class_aps(dets, gts, num_classes, tau))
}

fn mean_present(aps: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(GlodError::Invalid("no ground truth objects; mAP undefined".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn mse<T: Real>(pred: &[T], gt: &[T]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d = (p - g).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / n
}

/// PSNR for a given mean squared error, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(max^2 / MSE)` between two heatmaps.
pub fn heatmap_psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, max_val: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(GlodError::Invalid(format!("psnr: shapes {:?} and {:?} differ", pred.shape(), gt.shape())));
    }
    Ok(psnr_from_mse(mse(pred.data(), gt.data()), max_val))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub psnr: f64,
    pub gt_count: usize,
    pub det_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub classes: Vec<ClassReport>,
    pub map50: f64,
    pub map75: f64,
    /// PSNR over all classes and images together.
    pub psnr: f64,
}

/// Accumulates squared heatmap error per class across images.
#[derive(Clone, Debug, Default)]
pub struct PsnrAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl PsnrAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { sums: vec![0.0; num_classes], counts: vec![0; num_classes] }
    }

    /// Adds one image's `[K, h, w]` prediction and target.
    pub fn add(&mut self, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
        if pred.shape() != gt.shape() || pred.shape()[0] != self.sums.len() {
            return Err(GlodError::Invalid("psnr: heatmap shapes differ".into()));
        }
        for c in 0..self.sums.len() {
            let (p, g) = (pred.channel(c), gt.channel(c));
            self.sums[c] += mse(p, g) * p.len() as f64;
            self.counts[c] += p.len();
        }
        Ok(())
    }

    pub fn class_psnr(&self, c: usize) -> f64 {
        psnr_from_mse(self.sums[c] / self.counts[c].max(1) as f64, 1.0)
    }

    pub fn overall_psnr(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        psnr_from_mse(self.sums.iter().sum::<f64>() / n.max(1) as f64, 1.0)
    }
}

pub fn evaluate(
    dets: &ImageMap<Detection>,
    gts: &ImageMap<GroundTruthObject>,
    psnr: &PsnrAccumulator,
    num_classes: usize,
) -> Result<EvalResult> {
    let ap50 = class_aps(dets, gts, num_classes, 0.5);
    let ap75 = class_aps(dets, gts, num_classes, 0.75);
    let classes = (0..num_classes)
        .map(|c| ClassReport {
            class_id: c,
            ap50: ap50[c],
            ap75: ap75[c],
            psnr: psnr.class_psnr(c),
            gt_count: gts.values().flatten().filter(|o| o.class_id == c).count(),
            det_count: dets.values().flatten().filter(|d| d.class_id == c).count(),
        })
        .collect();
    Ok(EvalResult { classes, map50: mean_present(&ap50)?, map75: mean_present(&ap75)?, psnr: psnr.overall_psnr() })
}

impl EvalResult {
    /// `class_id,AP50,AP75,PSNR,gt_count,det_count` rows plus a `mean` row;
    /// classes without ground truth print `NA` for AP.
    pub fn to_csv(&self) -> String {
        let ap = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("class_id,AP50,AP75,PSNR,gt_count,det_count\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{},{:.4},{},{}", c.class_id, ap(c.ap50), ap(c.ap75), c.psnr, c.gt_count, c.det_count);
        }
        let gt: usize = self.classes.iter().map(|c| c.gt_count).sum();
        let det: usize = self.classes.iter().map(|c| c.det_count).sum();
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.4},{gt},{det}", self.map50, self.map75, self.psnr);
        s
    }
}
