//! Box overlays and detection files.

use std::fmt::Write as _;

use glod_core::decode::Detection;
use glod_core::metrics::ImageMap;
use glod_tensor::Tensor;

pub const OUTLINE: usize = 3;

const PALETTE: [[f32; 3]; 8] = [
    [230.0, 25.0, 75.0],
    [60.0, 180.0, 75.0],
    [255.0, 225.0, 25.0],
    [0.0, 130.0, 200.0],
    [245.0, 130.0, 48.0],
    [145.0, 30.0, 180.0],
    [70.0, 240.0, 240.0],
    [240.0, 50.0, 230.0],
];

pub fn class_color(class_id: usize) -> [f32; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Draws each box as an outline `OUTLINE` pixels thick, lying inside the
/// box and clipped to the image. Lower-scored boxes are drawn first.
pub fn draw_boxes(image: &Tensor<f32>, dets: &[Detection]) -> Tensor<f32> {
    let mut out = image.clone();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    for d in order {
        let clip = |v: f32, n: usize| (v.round().max(0.0) as usize).min(n);
        let (x1, y1, x2, y2) = (clip(d.bbox[0], w), clip(d.bbox[1], h), clip(d.bbox[2], w), clip(d.bbox[3], h));
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        let color = class_color(d.class_id);
        let data = out.data_mut();
        for y in y1..y2 {
            for x in x1..x2 {
                let edge = x < x1 + OUTLINE || x + OUTLINE >= x2 || y < y1 + OUTLINE || y + OUTLINE >= y2;
                if edge {
                    for (c, v) in color.iter().enumerate() {
                        data[(c * h + y) * w + x] = *v;
                    }
                }
            }
        }
    }
    out
}

pub const DETECTION_HEADER: &str = "image_id\tclass_id\tscore\tx1\ty1\tx2\ty2";

pub fn detections_tsv(dets: &ImageMap<Detection>) -> String {
    let mut s = format!("{DETECTION_HEADER}\n");
    for (id, list) in dets {
        for d in list {
            let [x1, y1, x2, y2] = d.bbox;
            let _ = writeln!(s, "{id}\t{}\t{:.6}\t{x1:.3}\t{y1:.3}\t{x2:.3}\t{y2:.3}", d.class_id, d.score);
        }
    }
    s
}
