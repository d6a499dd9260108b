//! Heatmap to detections: local-maxima filtering, top-K, box
//! reconstruction, class-aware NMS and multi-kernel merging.

use std::cmp::Ordering;

use glod_tensor::ops::max_pool2d_same;
use glod_tensor::Tensor;

use crate::net::HeadOutput;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    /// `(x1, y1, x2, y2)` in input pixels.
    pub bbox: [f32; 4],
}

impl Detection {
    pub fn center(&self) -> (f32, f32) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)
    }

    pub fn area(&self) -> f32 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Local-maxima window is `2p + 1`.
    pub p: usize,
    pub top_k: usize,
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub merge_ps: Vec<usize>,
    pub output_stride: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { p: 1, top_k: 1000, score_threshold: 0.05, nms_iou: 0.5, merge_ps: vec![0, 1, 10, 20], output_stride: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub y: usize,
    pub x: usize,
    pub score: f32,
}

/// Score descending, then class, row, column.
fn peak_order(a: &Peak, b: &Peak) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
}

/// Cells equal to the maximum of their `(2p+1)^2` neighbourhood; ties all
/// survive. Sorted by [`peak_order`].
pub fn local_peaks(heatmap: &Tensor<f32>, p: usize) -> Vec<Peak> {
    let s = heatmap.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let pooled = max_pool2d_same(heatmap, 2 * p + 1).expect("odd window on a rank-3 map");
    let mut peaks = Vec::new();
    for (i, (&v, &m)) in heatmap.data().iter().zip(pooled.data()).enumerate() {
        if v == m {
            peaks.push(Peak { class_id: i / (h * w), y: (i / w) % h, x: i % w, score: v });
        }
    }
    debug_assert!(peaks.iter().all(|pk| pk.class_id < k));
    peaks.sort_by(peak_order);
    peaks
}

fn box_at(head: &HeadOutput<Tensor<f32>>, pk: &Peak, stride: f32) -> Detection {
    let s = head.heatmap.shape();
    let plane = s[1] * s[2];
    let i = pk.y * s[2] + pk.x;
    let (ox, oy) = (head.offset.data()[i], head.offset.data()[plane + i]);
    let (sw, sh) = (head.size.data()[i], head.size.data()[plane + i]);
    let cx = (pk.x as f32 + ox) * stride;
    let cy = (pk.y as f32 + oy) * stride;
    let (w, h) = (sw * stride, sh * stride);
    Detection { class_id: pk.class_id, score: pk.score, bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0] }
}

/// Peaks at `cfg.p`, global top-K, boxes, then the score threshold.
pub fn decode(head: &HeadOutput<Tensor<f32>>, cfg: &DecodeConfig) -> Vec<Detection> {
    decode_at(head, cfg, cfg.p)
}

pub fn decode_at(head: &HeadOutput<Tensor<f32>>, cfg: &DecodeConfig, p: usize) -> Vec<Detection> {
    let stride = cfg.output_stride as f32;
    local_peaks(&head.heatmap, p)
        .iter()
        .take(cfg.top_k)
        .map(|pk| box_at(head, pk, stride))
        .filter(|d| d.score >= cfg.score_threshold && d.bbox[2] > d.bbox[0] && d.bbox[3] > d.bbox[1])
        .collect()
}

/// Intersection over union of `(x1, y1, x2, y2)` boxes.
pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy class-aware suppression. Candidates are visited by score
/// descending, ties in input order.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
        .then(ay.partial_cmp(&by).unwrap_or(Ordering::Equal))
        .then(ax.partial_cmp(&bx).unwrap_or(Ordering::Equal))
}

/// Union of [`decode_at`] over `cfg.merge_ps`, exact duplicates removed,
/// then [`nms`].
pub fn multi_kernel_decode(head: &HeadOutput<Tensor<f32>>, cfg: &DecodeConfig) -> Vec<Detection> {
    let mut all: Vec<Detection> = Vec::new();
    for &p in &cfg.merge_ps {
        for d in decode_at(head, cfg, p) {
            let dup = all.iter().any(|e| {
                e.class_id == d.class_id && e.bbox.iter().zip(&d.bbox).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            if !dup {
                all.push(d);
            }
        }
    }
    all.sort_by(detection_order);
    nms(&all, cfg.nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_spot_values() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou(&a, &[0.5, 0.0, 1.5, 1.0]) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn p_zero_keeps_every_cell() {
        let t = Tensor::from_fn(vec![2, 3, 3], |i| i as f32 * 0.01);
        assert_eq!(local_peaks(&t, 0).len(), 18);
    }

    #[test]
    fn nms_keeps_higher_duplicate() {
        let a = Detection { class_id: 0, score: 0.8, bbox: [0.0, 0.0, 4.0, 4.0] };
        let b = Detection { score: 0.9, ..a };
        assert_eq!(nms(&[a, b], 0.5), vec![b]);
    }
}
