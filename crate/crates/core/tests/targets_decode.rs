use glod_core::data::{generate_scene, SceneSpec};
use glod_core::decode::*;
use glod_core::loss::*;
use glod_core::metrics::*;
use glod_core::net::HeadOutput;
use glod_core::targets::*;
use glod_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bisection on each corner-perturbation IoU curve; the radius is the
/// smallest shift at which any of them falls to `o`.
fn radius_oracle(w: f64, h: f64, o: f64) -> f64 {
    let shifted = |r: f64| (w - r) * (h - r) / (2.0 * w * h - (w - r) * (h - r));
    let shrunk = |r: f64| (w - 2.0 * r) * (h - 2.0 * r) / (w * h);
    let grown = |r: f64| w * h / ((w + 2.0 * r) * (h + 2.0 * r));
    let solve = |f: &dyn Fn(f64) -> f64, hi: f64| {
        let (mut lo, mut hi) = (0.0, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) >= o {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let m = w.min(h);
    solve(&shifted, m).min(solve(&shrunk, m / 2.0)).min(solve(&grown, 10.0 * (w + h)))
}

#[test]
fn gaussian_radius_matches_bisection() {
    for &(w, h) in &[(1.0, 1.0), (2.0, 3.0), (8.0, 4.5), (30.0, 2.0), (100.0, 100.0)] {
        let r = gaussian_radius_unclamped(w, h, 0.7);
        assert!((r - radius_oracle(w, h, 0.7)).abs() < 1e-9, "{w}x{h}: {r}");
        assert_eq!(gaussian_radius(w, h, 0.7), r.max(1.0));
    }
}

#[test]
fn gaussian_stamp_peaks_at_one_and_decays() {
    let mut plane = vec![0.0f32; 81];
    draw_gaussian(&mut plane, 9, 9, 4, 4, 3.0);
    assert_eq!(plane[40], 1.0);
    let sigma = 1.0f64;
    assert!((plane[41] as f64 - (-0.5 / (sigma * sigma)).exp()).abs() < 1e-6);
    assert!(plane[0] < plane[40] && plane[0] >= 0.0);
}

fn one_cell_targets(y: f32) -> DetectionTargets {
    let heatmap = Tensor::full(vec![1, 1, 1], y);
    let centers = if y == 1.0 {
        vec![CenterTarget { class_id: 0, x: 0, y: 0, offset: [0.0, 0.0], size: [1.0, 1.0] }]
    } else {
        vec![]
    };
    DetectionTargets { heatmap, centers, neg_mask: vec![] }
}

#[test]
fn focal_spot_value_at_half_confidence() {
    let cells = FocalCells::from_targets(&one_cell_targets(1.0), FOCAL_BETA);
    let pred = Tensor::<f64>::full(vec![1, 1, 1], 0.5);
    let v = focal_loss_value(&pred, &cells, FOCAL_ALPHA);
    assert!((v - 0.17328680).abs() < 1e-6, "{v}");
    assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn focal_negative_is_reduced_by_target_proximity() {
    let t = one_cell_targets(0.5);
    let cells = FocalCells::from_targets(&t, FOCAL_BETA);
    let pred = Tensor::<f64>::full(vec![1, 1, 1], 0.25);
    let expect = 0.5f64.powi(4) * 0.25f64.powi(2) * -(0.75f64.ln());
    assert!((focal_loss_value(&pred, &cells, FOCAL_ALPHA) - expect).abs() < 1e-15);
}

#[test]
fn focal_gradient_matches_finite_difference() {
    let objs = [GroundTruthObject::new(0, 13.0, 9.0, 8.0, 6.0), GroundTruthObject::new(1, 40.0, 30.0, 20.0, 12.0)];
    let t = encode_targets(&objs, &TargetConfig::new(2, 4, 64), 5).unwrap();
    let cells = FocalCells::from_targets(&t, FOCAL_BETA);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred = Tensor::<f64>::from_fn(vec![2, 16, 16], |_| rng.gen_range(0.05..0.95));
    let g = focal_loss_grad(&pred, &cells, FOCAL_ALPHA);
    let r = glod_tensor::finite_diff_check(&pred, &g, 1e-6, None, |p| focal_loss_value(p, &cells, FOCAL_ALPHA));
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn smooth_l1_at_beta_is_half_beta() {
    for beta in [0.5, 1.0, 2.0, 1.0 / 9.0] {
        assert_eq!(smooth_l1(beta, beta), 0.5 * beta);
        assert_eq!(smooth_l1(-beta, beta), 0.5 * beta);
    }
}

#[test]
fn total_loss_is_sum_of_terms() {
    let objs = [GroundTruthObject::new(0, 13.0, 9.0, 8.0, 6.0)];
    let t = encode_targets(&objs, &TargetConfig::new(1, 4, 32), 5).unwrap();
    let mut g = Graph::<f64>::new();
    let head = HeadOutput {
        heatmap: g.input(Tensor::full(vec![1, 8, 8], 0.3)),
        offset: g.input(Tensor::full(vec![2, 8, 8], 0.1)),
        size: g.input(Tensor::full(vec![2, 8, 8], 1.5)),
    };
    let (loss, b) = total_loss(&mut g, &head, &t, LossWeights::default()).unwrap();
    assert!((g.value(loss).item() - (b.cls + b.off + b.size)).abs() < 1e-12);
    assert!((b.total - (b.cls + b.off + b.size)).abs() < 1e-12);
}

#[test]
fn encode_decode_round_trip_on_scenes() {
    let spec = SceneSpec::desk(128);
    let tcfg = TargetConfig::new(spec.num_classes(), 4, 128);
    let dcfg = DecodeConfig::default();
    let mut total = 0;
    for seed in 0..50 {
        let scene = generate_scene(seed, &spec).unwrap();
        let t = encode_targets(&scene.objects, &tcfg, seed).unwrap();
        let dets = decode_at(&t.as_head_output(), &dcfg, 1);
        for o in &scene.objects {
            total += 1;
            let (cx, cy) = ((o.cx / 4.0).floor(), (o.cy / 4.0).floor());
            let hit = dets.iter().find(|d| {
                let (dx, dy) = d.center();
                d.class_id == o.class_id && (dx / 4.0).floor() == cx && (dy / 4.0).floor() == cy
            });
            let d = hit.unwrap_or_else(|| panic!("seed {seed}: lost {o:?}"));
            let (dx, dy) = d.center();
            assert!((dx - o.cx).abs() < 1e-3 && (dy - o.cy).abs() < 1e-3, "{o:?} vs {d:?}");
            for (a, b) in d.bbox.iter().zip(o.bbox()) {
                assert!((a - b).abs() <= 1.0, "{o:?} vs {d:?}");
            }
        }
    }
    assert!(total > 500);
}

fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..60.0f32), rng.gen_range(0.0..60.0f32));
            let (w, h) = (rng.gen_range(2.0..20.0f32), rng.gen_range(2.0..20.0f32));
            // Coarse scores so ties occur.
            let score = rng.gen_range(1..20) as f32 / 20.0;
            Detection { class_id: rng.gen_range(0..3), score, bbox: [x, y, x + w, y + h] }
        })
        .collect()
}

/// Quadratic reference: mark suppressions forward from each survivor.
fn nms_oracle(dets: &[Detection], thr: f32) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps input order among equal scores.
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &idx[k + 1..] {
            let a = &dets[i].bbox;
            let b = &dets[j].bbox;
            let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
            let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
            let inter = iw * ih;
            let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
            if dets[j].class_id == dets[i].class_id && inter / union >= thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let dets = random_dets(&mut rng, 50);
        assert_eq!(nms(&dets, 0.5), nms_oracle(&dets, 0.5));
    }
}

#[test]
fn ap_three_detection_example() {
    let gts = vec![(0, [0.0, 0.0, 10.0, 10.0]), (0, [20.0, 20.0, 30.0, 30.0])];
    let sb = |score, bbox| ScoredBox { image_id: 0, score, bbox };
    let dets = vec![sb(0.9, [0.0, 0.0, 10.0, 10.0]), sb(0.8, [50.0, 50.0, 60.0, 60.0]), sb(0.7, [20.0, 20.0, 30.0, 30.0])];
    // PR points: (0.5, 1), (0.5, 0.5), (1, 2/3); envelope area 0.5 * 1 + 0.5 * 2/3.
    let ap = average_precision(&dets, &gts, 0.5).unwrap();
    assert!((ap - 0.8333333).abs() < 1e-6, "{ap}");
    assert_eq!(average_precision(&dets, &[], 0.5), None);
}

#[test]
fn psnr_spot_values() {
    assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
    assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
    assert_eq!(psnr_from_mse(0.0, 1.0), PSNR_CAP_DB);
}

fn heatmap_from(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> HeadOutput<Tensor<f32>> {
    HeadOutput {
        heatmap: Tensor::from_fn(vec![k, h, w], |_| rng.gen_range(0.0..1.0)),
        offset: Tensor::from_fn(vec![2, h, w], |_| rng.gen_range(0.0..1.0)),
        size: Tensor::from_fn(vec![2, h, w], |_| rng.gen_range(0.5..4.0)),
    }
}

#[test]
fn radius_of_ten_by_ten_box() {
    let r = gaussian_radius_unclamped(10.0, 10.0, 0.7);
    assert!((r - radius_oracle(10.0, 10.0, 0.7)).abs() < 1e-9);
    assert!((r - 5.0 * (1.0 - 0.7f64.sqrt())).abs() < 1e-12);
    assert_eq!(gaussian_radius(1.0, 1.0, 0.7), MIN_RADIUS);
}

#[test]
fn object_on_cell_corner_has_zero_offset() {
    let objs = [GroundTruthObject::new(0, 12.0, 20.0, 8.0, 8.0)];
    let t = encode_targets(&objs, &TargetConfig::new(1, 4, 32), 0).unwrap();
    assert_eq!((t.centers[0].x, t.centers[0].y), (3, 5));
    assert_eq!(t.centers[0].offset, [0.0, 0.0]);
}

#[test]
fn single_object_has_one_unit_cell() {
    let objs = [GroundTruthObject::new(1, 30.0, 18.0, 20.0, 12.0)];
    let t = encode_targets(&objs, &TargetConfig::new(2, 4, 64), 0).unwrap();
    let ones: Vec<usize> = t.heatmap.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
    assert_eq!(ones, vec![256 + 4 * 16 + 7]);
    for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
        assert!(t.heatmap.at(&[1, (4 + dy) as usize, (7 + dx) as usize]) < 1.0);
    }
}

#[test]
fn overlapping_gaussians_take_the_pointwise_max() {
    let objs = [GroundTruthObject::new(0, 20.0, 20.0, 16.0, 16.0), GroundTruthObject::new(0, 24.0, 21.0, 12.0, 20.0)];
    let cfg = TargetConfig::new(1, 4, 64);
    let both = encode_targets(&objs, &cfg, 0).unwrap();
    let a = encode_targets(&objs[..1], &cfg, 0).unwrap();
    let b = encode_targets(&objs[1..], &cfg, 0).unwrap();
    // Brute-force render of each object alone.
    let render = |o: &GroundTruthObject| {
        let (x, y) = ((o.cx / 4.0).floor() as f64, (o.cy / 4.0).floor() as f64);
        let sigma = gaussian_radius(o.w as f64 / 4.0, o.h as f64 / 4.0, 0.7) / 3.0;
        let e = (sigma * 3.0).ceil();
        Tensor::<f32>::from_fn(vec![1, 16, 16], |i| {
            let (cy, cx) = ((i / 16) as f64, (i % 16) as f64);
            if (cx - x).abs() > e || (cy - y).abs() > e {
                0.0
            } else {
                (-((cx - x).powi(2) + (cy - y).powi(2)) / (2.0 * sigma * sigma)).exp() as f32
            }
        })
    };
    assert_eq!(a.heatmap, render(&objs[0]));
    assert_eq!(b.heatmap, render(&objs[1]));
    assert_eq!(both.heatmap, a.heatmap.zip_map(&b.heatmap, f32::max).unwrap());
}

#[test]
fn smooth_l1_values_and_knee_continuity() {
    assert_eq!(smooth_l1(0.0, 1.0), 0.0);
    assert_eq!(smooth_l1(2.0, 1.0), 1.5);
    for beta in [0.3, 1.0, 2.5] {
        let below = smooth_l1(beta * (1.0 - 1e-15), beta);
        let above = smooth_l1(beta * (1.0 + 1e-15), beta);
        assert!((below - above).abs() < 1e-12);
    }
}

#[test]
fn loss_weights_scale_only_their_term() {
    let objs = [GroundTruthObject::new(0, 13.0, 9.0, 8.0, 6.0)];
    let t = encode_targets(&objs, &TargetConfig::new(1, 4, 32), 5).unwrap();
    let breakdown = |w: LossWeights| {
        let mut g = Graph::<f64>::new();
        let head = HeadOutput {
            heatmap: g.input(Tensor::full(vec![1, 8, 8], 0.3)),
            offset: g.input(Tensor::full(vec![2, 8, 8], 0.1)),
            size: g.input(Tensor::full(vec![2, 8, 8], 1.5)),
        };
        total_loss(&mut g, &head, &t, w).unwrap().1
    };
    let base = breakdown(LossWeights::default());
    let double = breakdown(LossWeights { cls: 2.0, ..LossWeights::default() });
    assert_eq!(double.cls, 2.0 * base.cls);
    assert_eq!((double.off, double.size), (base.off, base.size));
    let zero = breakdown(LossWeights { cls: 0.0, off: 0.0, size: 0.0 });
    assert_eq!(zero.total, 0.0);
}

#[test]
fn perfect_prediction_has_zero_regression_loss() {
    let objs = [GroundTruthObject::new(0, 13.0, 9.0, 8.0, 6.0)];
    let t = encode_targets(&objs, &TargetConfig::new(1, 4, 32), 5).unwrap();
    let perfect = t.as_head_output().cast::<f64>();
    assert_eq!(smooth_l1_value(&perfect.offset, &RegressionCells::offsets(&t), 1.0), 0.0);
    assert_eq!(smooth_l1_value(&perfect.size, &RegressionCells::sizes(&t), 1.0), 0.0);
}

fn spike(k: usize, side: usize, cells: &[(usize, usize, usize, f32)]) -> HeadOutput<Tensor<f32>> {
    let mut heatmap = Tensor::zeros(vec![k, side, side]);
    for &(c, y, x, v) in cells {
        heatmap.set(&[c, y, x], v);
    }
    HeadOutput { heatmap, offset: Tensor::zeros(vec![2, side, side]), size: Tensor::full(vec![2, side, side], 2.0) }
}

#[test]
fn single_spike_is_the_only_detection() {
    let head = spike(2, 12, &[(1, 4, 7, 0.8)]);
    for p in [0, 1, 3, 10] {
        let dets = decode_at(&head, &DecodeConfig::default(), p);
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].class_id, dets[0].center()), (1, (28.0, 16.0)));
    }
}

#[test]
fn equal_peaks_both_survive_at_any_window() {
    let head = spike(1, 12, &[(0, 5, 2, 0.7), (0, 5, 5, 0.7)]);
    for p in [0, 1, 2, 3, 4, 8] {
        let peaks: Vec<_> = local_peaks(&head.heatmap, p).into_iter().filter(|k| k.score > 0.0).collect();
        assert_eq!(peaks.len(), 2, "p = {p}");
    }
}

#[test]
fn exhaustive_small_grid_peaks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let map = Tensor::<f32>::from_fn(vec![1, 5, 6], |_| rng.gen_range(0..4) as f32);
        for p in 0..4usize {
            let mut expect = vec![];
            for y in 0..5usize {
                for x in 0..6usize {
                    let v = map.at(&[0, y, x]);
                    let mut max = f32::NEG_INFINITY;
                    for yy in y.saturating_sub(p)..(y + p + 1).min(5) {
                        for xx in x.saturating_sub(p)..(x + p + 1).min(6) {
                            max = max.max(map.at(&[0, yy, xx]));
                        }
                    }
                    if v == max {
                        expect.push((y, x));
                    }
                }
            }
            let mut got: Vec<_> = local_peaks(&map, p).iter().map(|k| (k.y, k.x)).collect();
            got.sort();
            assert_eq!(got, expect);
        }
    }
}

#[test]
fn empty_heatmap_gives_nothing() {
    let head = spike(3, 8, &[]);
    let cfg = DecodeConfig { score_threshold: 0.1, ..DecodeConfig::default() };
    assert!(decode(&head, &cfg).is_empty());
    assert!(multi_kernel_decode(&head, &cfg).is_empty());
}

#[test]
fn top_k_keeps_the_stronger_object() {
    let head = spike(2, 12, &[(0, 2, 2, 0.6), (1, 8, 8, 0.9)]);
    let dets = decode(&head, &DecodeConfig { top_k: 1, ..DecodeConfig::default() });
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].score, 0.9);
}

#[test]
fn merged_decode_keeps_tiny_object_beside_huge_one() {
    // One class: a huge object peaking at 0.9 and a tiny one at 0.6 four
    // cells away; a p = 20 window only sees the huge peak.
    let mut head = spike(1, 32, &[(0, 16, 16, 0.9), (0, 16, 20, 0.6)]);
    head.size.set(&[0, 16, 16], 12.0);
    head.size.set(&[1, 16, 16], 12.0);
    head.size.set(&[0, 16, 20], 1.0);
    head.size.set(&[1, 16, 20], 1.0);
    let cfg = DecodeConfig::default();
    assert_eq!(decode_at(&head, &cfg, 20).len(), 1);
    let merged = multi_kernel_decode(&head, &cfg);
    assert_eq!(merged.len(), 2);
    assert!(merged.iter().any(|d| d.area() < 20.0) && merged.iter().any(|d| d.area() > 2000.0));
}

#[test]
fn single_p_merge_equals_decode_then_nms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [0, 1, 3] {
        let head = heatmap_from(&mut rng, 3, 10, 10);
        let cfg = DecodeConfig { merge_ps: vec![p], ..DecodeConfig::default() };
        assert_eq!(multi_kernel_decode(&head, &cfg), nms(&decode_at(&head, &cfg, p), cfg.nms_iou));
    }
}

#[test]
fn single_match_at_iou_point_six() {
    let gts = vec![(0, [0.0, 0.0, 10.0, 10.0])];
    let dets = vec![ScoredBox { image_id: 0, score: 0.5, bbox: [0.0, 0.0, 10.0, 6.0] }];
    assert_eq!(average_precision(&dets, &gts, 0.5), Some(1.0));
    assert_eq!(average_precision(&dets, &gts, 0.75), Some(0.0));
}

fn image_maps(entries: &[(u64, usize, [f32; 4], f32)]) -> (ImageMap<Detection>, ImageMap<GroundTruthObject>) {
    let mut dets = ImageMap::new();
    let mut gts = ImageMap::new();
    for &(id, class_id, b, score) in entries {
        let o = GroundTruthObject::new(class_id, (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]);
        gts.entry(id).or_insert_with(Vec::new).push(o);
        if score > 0.0 {
            dets.entry(id).or_insert_with(Vec::new).push(Detection { class_id, score, bbox: b });
        }
    }
    (dets, gts)
}

#[test]
fn map_spot_values() {
    let (dets, gts) = image_maps(&[(0, 0, [0.0, 0.0, 8.0, 8.0], 0.9), (1, 0, [4.0, 4.0, 12.0, 12.0], 0.8)]);
    assert_eq!(map_at(&dets, &gts, 3, 0.5).unwrap(), 1.0);
    assert_eq!(map_at(&dets, &gts, 3, 0.75).unwrap(), 1.0);
    let (dets, gts) = image_maps(&[(0, 0, [0.0, 0.0, 8.0, 8.0], 0.9), (0, 1, [20.0, 0.0, 28.0, 8.0], 0.0)]);
    assert_eq!(map_at(&dets, &gts, 2, 0.5).unwrap(), 0.5);
    assert_eq!(class_aps(&dets, &gts, 3, 0.5), vec![Some(1.0), Some(0.0), None]);
    assert!(map_at(&ImageMap::new(), &ImageMap::new(), 2, 0.5).is_err());
}

#[test]
fn map_ignores_image_labels() {
    let entries = [(0, 0, [0.0, 0.0, 8.0, 8.0], 0.9), (1, 0, [4.0, 4.0, 12.0, 12.0], 0.3), (2, 1, [1.0, 1.0, 5.0, 5.0], 0.6)];
    let (dets, gts) = image_maps(&entries);
    let relabeled: Vec<_> = entries.iter().map(|&(id, c, b, s)| (10 - id, c, b, s)).collect();
    let (dets2, gts2) = image_maps(&relabeled);
    assert_eq!(map_at(&dets, &gts, 2, 0.5).unwrap(), map_at(&dets2, &gts2, 2, 0.5).unwrap());
}

fn random_ap_case(rng: &mut ChaCha8Rng) -> (Vec<ScoredBox>, Vec<(u64, [f32; 4])>) {
    let gts: Vec<(u64, [f32; 4])> = (0..6)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..50.0f32), rng.gen_range(0.0..50.0f32));
            (rng.gen_range(0..3), [x, y, x + 10.0, y + 10.0])
        })
        .collect();
    let dets = gts
        .iter()
        .chain(&gts[..2])
        .map(|(id, b)| {
            let j = rng.gen_range(-4.0..4.0f32);
            ScoredBox { image_id: *id, score: rng.gen_range(0.01..1.0), bbox: [b[0] + j, b[1], b[2] + j, b[3]] }
        })
        .collect();
    (dets, gts)
}

proptest! {
    #[test]
    fn radius_is_monotone_in_size(w in 0.5f64..50.0, h in 0.5f64..50.0, k in 1.0f64..3.0) {
        prop_assert!(gaussian_radius(w * k, h * k, 0.7) >= gaussian_radius(w, h, 0.7));
    }

    #[test]
    fn offsets_and_sizes_are_valid(cx in 0.0f32..63.99, cy in 0.0f32..63.99, w in 0.5f32..40.0, h in 0.5f32..40.0) {
        let t = encode_targets(&[GroundTruthObject::new(0, cx, cy, w, h)], &TargetConfig::new(1, 4, 64), 0).unwrap();
        let c = &t.centers[0];
        prop_assert!(c.offset.iter().all(|&o| (0.0..1.0).contains(&o)));
        prop_assert!(c.size.iter().all(|&s| s > 0.0));
        prop_assert_eq!(t.heatmap.at(&[0, c.y, c.x]), 1.0);
    }

    #[test]
    fn ap_depends_only_on_score_ranking(seed in 0u64..300, a in 0.1f32..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_ap_case(&mut rng);
        let rescaled: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: (d.score * a).powi(3), ..*d }).collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&rescaled, &gts, 0.5));
    }

    #[test]
    fn leading_false_positive_never_helps(seed in 0u64..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dets, gts) = random_ap_case(&mut rng);
        let before = average_precision(&dets, &gts, 0.5).unwrap();
        dets.push(ScoredBox { image_id: 0, score: 2.0, bbox: [200.0, 200.0, 210.0, 210.0] });
        prop_assert!(average_precision(&dets, &gts, 0.5).unwrap() <= before + 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_decreasing(seed in 0u64..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn(vec![2, 4, 4], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::<f64>::from_fn(vec![2, 4, 4], |_| rng.gen_range(0.0..1.0));
        prop_assert_eq!(heatmap_psnr(&a, &b, 1.0).unwrap(), heatmap_psnr(&b, &a, 1.0).unwrap());
        let m = rng.gen_range(1e-6..1.0);
        prop_assert!(psnr_from_mse(m * 1.01, 1.0) < psnr_from_mse(m, 1.0));
    }

    #[test]
    fn merged_count_is_at_most_the_sum(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = heatmap_from(&mut rng, 2, 10, 10);
        let cfg = DecodeConfig::default();
        let total: usize = cfg.merge_ps.iter().map(|&p| decode_at(&head, &cfg, p).len()).sum();
        prop_assert!(multi_kernel_decode(&head, &cfg).len() <= total);
    }

    #[test]
    fn decode_follows_class_relabeling(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = heatmap_from(&mut rng, 3, 8, 8);
        let perm = [2usize, 0, 1];
        let mut swapped = head.clone();
        for (from, &to) in perm.iter().enumerate() {
            let plane = head.heatmap.channel(from).to_vec();
            swapped.heatmap.data_mut()[to * 64..(to + 1) * 64].copy_from_slice(&plane);
        }
        let cfg = DecodeConfig::default();
        let key = |d: &Detection, relabel: bool| {
            let c = if relabel { perm[d.class_id] } else { d.class_id };
            (c, d.bbox.map(f32::to_bits), d.score.to_bits())
        };
        let mut a: Vec<_> = decode_at(&head, &cfg, 1).iter().map(|d| key(d, true)).collect();
        let mut b: Vec<_> = decode_at(&swapped, &cfg, 1).iter().map(|d| key(d, false)).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
    #[test]
    fn peaks_shrink_as_window_grows(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = heatmap_from(&mut rng, 2, 12, 12);
        let mut prev: Option<Vec<(usize, usize, usize)>> = None;
        for p in [0, 1, 2, 5, 10] {
            let cur: Vec<_> = local_peaks(&head.heatmap, p).iter().map(|k| (k.class_id, k.y, k.x)).collect();
            if let Some(prev) = &prev {
                prop_assert!(cur.iter().all(|c| prev.contains(c)));
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn nms_output_has_no_same_class_overlap(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_dets(&mut rng, 40);
        let kept = nms(&dets, 0.5);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) < 0.5);
            }
        }
        prop_assert_eq!(nms(&kept, 0.5), kept);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::array::uniform4(0.0f32..50.0), b in prop::array::uniform4(0.0f32..50.0)) {
        let norm = |v: [f32; 4]| [v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]) + 0.1, v[1].max(v[3]) + 0.1];
        let (a, b) = (norm(a), norm(b));
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn map75_never_exceeds_map50(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<(u64, [f32; 4])> = (0..8).map(|_| { let x = rng.gen_range(0.0..50.0f32); let y = rng.gen_range(0.0..50.0f32); (rng.gen_range(0..3), [x, y, x + 10.0, y + 10.0]) }).collect();
        let dets: Vec<ScoredBox> = gts.iter().map(|(id, b)| {
            let j = rng.gen_range(-3.0..3.0f32);
            ScoredBox { image_id: *id, score: rng.gen_range(0.0..1.0), bbox: [b[0] + j, b[1], b[2] + j, b[3]] }
        }).collect();
        let a50 = average_precision(&dets, &gts, 0.5).unwrap();
        let a75 = average_precision(&dets, &gts, 0.75).unwrap();
        prop_assert!(a75 <= a50 + 1e-12);
    }

    #[test]
    fn focal_loss_is_nonnegative(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objs = [GroundTruthObject::new(rng.gen_range(0..2), rng.gen_range(1.0..31.0), rng.gen_range(1.0..31.0), 6.0, 4.0)];
        let t = encode_targets(&objs, &TargetConfig::new(2, 4, 32), seed).unwrap();
        let cells = FocalCells::from_targets(&t, FOCAL_BETA);
        let pred = Tensor::<f64>::from_fn(vec![2, 8, 8], |_| rng.gen_range(0.0..1.0));
        prop_assert!(focal_loss_value(&pred, &cells, FOCAL_ALPHA) >= 0.0);
    }

    #[test]
    fn neg_mask_size_and_background(seed in 0u64..300) {
        let objs = [GroundTruthObject::new(0, 20.0, 20.0, 10.0, 10.0)];
        let t = encode_targets(&objs, &TargetConfig::new(3, 4, 64), seed).unwrap();
        let bg = t.heatmap.data().iter().filter(|&&v| v < BACKGROUND_LEVEL).count();
        prop_assert_eq!(t.neg_mask.len(), (NEG_RATIO * bg as f64).round() as usize);
        prop_assert!(t.neg_mask.iter().all(|&i| t.heatmap.data()[i] < BACKGROUND_LEVEL));
        prop_assert!(t.neg_mask.windows(2).all(|w| w[0] < w[1]));
    }
}
