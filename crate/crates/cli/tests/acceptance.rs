//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Positional arguments select criteria by
//! substring.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use glod_core::data::{generate_scene, SceneSpec};
use glod_core::decode::{decode_at, nms, DecodeConfig, Detection};
use glod_core::experiments::{fusion_ablation, kernel_sweep, overfit, AblationSetup, OverfitRun, OverfitSetup};
use glod_core::gradcheck::run_suite;
use glod_core::loss::{focal_loss_value, smooth_l1, FocalCells, FOCAL_ALPHA, FOCAL_BETA};
use glod_core::metrics::{average_precision, psnr_from_mse, EvalResult, ScoredBox};
use glod_core::targets::{encode_targets, CenterTarget, DetectionTargets, TargetConfig};
use glod_core::train::cosine_warm_restart_lr;
use glod_tensor::ops::{conv2d, pixel_shuffle, ConvSpec};
use glod_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = anyhow::Result<(bool, String)>;

struct Runner {
    filters: Vec<String>,
    failed: Vec<String>,
    ran: usize,
}

impl Runner {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn report(&mut self, name: &str, outcome: Outcome, elapsed: Duration) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        println!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        let _ = std::io::stdout().flush();
        self.ran += 1;
        if !pass {
            self.failed.push(name.to_string());
        }
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if self.wants(name) {
            let start = Instant::now();
            let outcome = f();
            self.report(name, outcome, start.elapsed());
        }
    }
}

fn dyadic(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-64i32..=64) as f64 / 16.0)
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let opg = cout / s.groups;
    assert_eq!(cpg * s.groups, cin);
    let ho = (h + 2 * s.pad_h - s.dilation * (kh - 1) - 1) / s.stride + 1;
    let wo = (wd + 2 * s.pad_w - s.dilation * (kw - 1) - 1) / s.stride + 1;
    let mut out = Tensor::zeros(vec![cout, ho, wo]);
    for co in 0..cout {
        let g = co / opg;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[co];
                for ci in 0..cpg {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad_h as isize;
                            let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad_w as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                acc += x.at(&[g * cpg + ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

fn conv_oracle() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // cin, cout, h, w, kh, kw, stride, pad_h, pad_w, dilation, groups
    let cases = [
        (3, 4, 7, 6, 3, 3, 1, 1, 1, 1, 1),
        (4, 6, 8, 8, 1, 3, 1, 0, 1, 1, 2),
        (2, 2, 9, 5, 3, 1, 2, 1, 0, 1, 1),
        (4, 4, 8, 8, 3, 3, 1, 2, 2, 2, 4),
        (6, 3, 5, 7, 2, 2, 2, 0, 0, 1, 3),
    ];
    cases.iter().all(|&(cin, cout, h, w, kh, kw, stride, ph, pw, dil, groups)| {
        let spec = ConvSpec::new(kh, kw).with_stride(stride).with_padding(ph, pw).with_dilation(dil).with_groups(groups);
        let x = dyadic(&[cin, h, w], &mut rng);
        let wt = dyadic(&[cout, cin / groups, kh, kw], &mut rng);
        let b = dyadic(&[cout], &mut rng);
        conv2d(&x, &wt, Some(&b), &spec).map(|got| got == naive_conv(&x, &wt, &b, &spec)).unwrap_or(false)
    })
}

fn pixel_shuffle_oracle() -> bool {
    let (c, r, h, w) = (3, 3, 4, 5);
    let x = Tensor::from_fn(vec![c * r * r, h, w], |i| i as f64);
    let Ok(y) = pixel_shuffle(&x, r) else { return false };
    let mut ok = y.shape() == [c, r * h, r * w];
    for ch in 0..c {
        for yy in 0..r * h {
            for xx in 0..r * w {
                let src = [ch * r * r + (yy % r) * r + xx % r, yy / r, xx / r];
                ok &= y.at(&[ch, yy, xx]) == x.at(&src);
            }
        }
    }
    ok
}

fn box_iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

fn nms_oracle(dets: &[Detection], thr: f32) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &idx[k + 1..] {
            if dets[j].class_id == dets[i].class_id && box_iou(&dets[i].bbox, &dets[j].bbox) >= thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

fn nms_matches() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..100).all(|_| {
        let dets: Vec<Detection> = (0..50)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..60.0f32), rng.gen_range(0.0..60.0f32));
                let (w, h) = (rng.gen_range(2.0..20.0f32), rng.gen_range(2.0..20.0f32));
                let score = rng.gen_range(1..20) as f32 / 20.0;
                Detection { class_id: rng.gen_range(0..3), score, bbox: [x, y, x + w, y + h] }
            })
            .collect();
        nms(&dets, 0.5) == nms_oracle(&dets, 0.5)
    })
}

fn oracles() -> Outcome {
    let sb = |score, bbox| ScoredBox { image_id: 0, score, bbox };
    let gts = [(0, [0.0, 0.0, 10.0, 10.0]), (0, [20.0, 20.0, 30.0, 30.0])];
    let dets = [sb(0.9, [0.0, 0.0, 10.0, 10.0]), sb(0.8, [50.0, 50.0, 60.0, 60.0]), sb(0.7, [20.0, 20.0, 30.0, 30.0])];
    let ap = average_precision(&dets, &gts, 0.5).unwrap_or(f64::NAN);
    let (conv, shuffle, nms_ok) = (conv_oracle(), pixel_shuffle_oracle(), nms_matches());
    let ap_ok = (ap - 5.0 / 6.0).abs() < 1e-6;
    Ok((conv && shuffle && nms_ok && ap_ok, format!("conv2d exact {conv}, pixel_shuffle exact {shuffle}, nms 100/100 {nms_ok}, AP {ap:.7}")))
}

fn round_trip() -> Outcome {
    let spec = SceneSpec::desk(128);
    let tcfg = TargetConfig::new(spec.num_classes(), 4, 128);
    let dcfg = DecodeConfig::default();
    let (mut found, mut total, mut worst) = (0, 0, 0.0f32);
    for seed in 0..50u64 {
        let scene = generate_scene(seed.wrapping_mul(7919) + 1, &spec)?;
        let t = encode_targets(&scene.objects, &tcfg, seed)?;
        let dets = decode_at(&t.as_head_output(), &dcfg, 1);
        for o in &scene.objects {
            total += 1;
            let cell = ((o.cx / 4.0).floor(), (o.cy / 4.0).floor());
            let hit = dets.iter().find(|d| {
                let (x, y) = d.center();
                d.class_id == o.class_id && ((x / 4.0).floor(), (y / 4.0).floor()) == cell
            });
            if let Some(d) = hit {
                found += 1;
                for (a, b) in d.bbox.iter().zip(o.bbox()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok((found == total && worst <= 1.0, format!("{found}/{total} centers recovered, max box error {worst:.2e} px")))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = run_suite(0, 4)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let all = checks.iter().all(|c| c.passed());
    let list: Vec<String> = checks.iter().map(|c| format!("{} {:.1e}", c.block, c.max_rel_err)).collect();
    Ok((all && secs < 300.0, format!("max rel err {worst:.2e} < 1e-4 over {} blocks ({}), {secs:.0}s < 300s", checks.len(), list.join(", "))))
}

fn overfit_check(run: &OverfitRun, secs: f64) -> Outcome {
    let drop = run.loss_drop();
    let map50 = run.arm.result.map50;
    Ok((
        drop >= 0.9 && map50 >= 0.9 && secs < 900.0,
        format!(
            "loss {:.4} -> {:.4} (drop {:.1}% >= 90%), train mAP50 {map50:.4} >= 0.90, {secs:.0}s < 900s",
            run.mean_loss(10, 10),
            run.mean_loss(run.logs.len(), 10),
            100.0 * drop
        ),
    ))
}

fn non_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn non_decreasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn kernel_trend(run: &OverfitRun, setup: &OverfitSetup) -> Outcome {
    let ps = [0, 1, 5, 10, 20];
    let k = setup.model.num_classes;
    let cfg = setup.decode.clone();
    let sweep = kernel_sweep(k, &run.samples, &run.arm.heads, &cfg, &ps);
    // Small: class 0. Large: classes never shorter than 10 pixels.
    let large: Vec<usize> = setup.spec.classes.iter().enumerate().filter(|(_, c)| c.length.0 >= 10.0).map(|(i, _)| i).collect();
    let small: Vec<usize> = sweep.rows.iter().map(|r| r.counts[0]).collect();
    let big: Vec<usize> = sweep.rows.iter().map(|r| large.iter().map(|&c| r.counts[c]).sum()).collect();
    let best = sweep.rows.iter().map(|r| r.recall).fold(0.0, f64::max);
    let ok = non_increasing(&small) && non_decreasing(&big) && sweep.merged.recall >= best;
    Ok((
        ok,
        format!(
            "p {ps:?}: small {small:?} non-increasing {}, large {large:?} {big:?} non-decreasing {}, merged recall {:.4} >= best single {best:.4}",
            non_increasing(&small),
            non_decreasing(&big),
            sweep.merged.recall
        ),
    ))
}

fn fusion(results: &mut Vec<EvalResult>) -> Outcome {
    let setup = AblationSetup::desk();
    let (train, val) = setup.samples()?;
    let mut wins = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..5 {
        let (run, _) = fusion_ablation(&setup, seed, &train, &val)?;
        let (a, b) = run.on_at_least_off();
        wins.0 += a as usize;
        wins.1 += b as usize;
        rows.push(format!("s{seed} {:.3}/{:.3} vs {:.3}/{:.3}", run.on.map50, run.on.map75, run.off.map50, run.off.map75));
        results.push(run.on);
        results.push(run.off);
    }
    Ok((wins.0 >= 4 && wins.1 >= 4, format!("on >= off: mAP50 {}/5, mAP75 {}/5 (need 4/5 each; on/off mAP50/mAP75 {})", wins.0, wins.1, rows.join("; "))))
}

fn loss_spots() -> Outcome {
    let t = DetectionTargets {
        heatmap: Tensor::full(vec![1, 1, 1], 1.0),
        centers: vec![CenterTarget { class_id: 0, x: 0, y: 0, offset: [0.0, 0.0], size: [1.0, 1.0] }],
        neg_mask: vec![],
    };
    let focal = focal_loss_value(&Tensor::<f64>::full(vec![1, 1, 1], 0.5), &FocalCells::from_targets(&t, FOCAL_BETA), FOCAL_ALPHA);
    let sl1 = [0.5, 1.0, 1.0 / 9.0, 3.0].iter().all(|&b| smooth_l1(b, b) == 0.5 * b);
    let (hi, lo, period) = (1e-3, 1e-5, 100);
    let lr0 = cosine_warm_restart_lr(0, period, hi, lo);
    let lr_half = cosine_warm_restart_lr(period / 2, period, hi, lo);
    let ok = (focal - 0.17328680).abs() < 1e-6 && sl1 && lr0 == hi && (lr_half - (hi + lo) / 2.0).abs() < 1e-12;
    Ok((ok, format!("focal {focal:.8}, smooth_l1(beta) = beta/2 {sl1}, lr(0) {lr0:e}, lr(T/2) {lr_half:e}")))
}

fn psnr(results: &[EvalResult]) -> Outcome {
    let (a, b) = (psnr_from_mse(0.01, 1.0), psnr_from_mse(1.0, 1.0));
    let ordered = results.iter().all(|r| r.map75 <= r.map50 && r.classes.iter().all(|c| c.ap75 <= c.ap50));
    Ok((a == 20.0 && b == 0.0 && ordered, format!("MSE 0.01 -> {a} dB, MSE 1 -> {b} dB, mAP75 <= mAP50 on {} evaluation runs {ordered}", results.len())))
}

fn tree(root: &Path) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.display().to_string(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn glod(args: &[&str]) -> anyhow::Result<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_glod")).args(args).env("RUST_LOG", "warn").stdout(Stdio::null()).status()?;
    anyhow::ensure!(status.success(), "glod {args:?} exited with {status}");
    Ok(())
}

fn determinism(results: &mut Vec<EvalResult>) -> Outcome {
    let tmp = tempfile::tempdir()?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let s = |p: &str| root.join(p).display().to_string();
        glod(&["gen", "--seed", "7", "--images", "12", "--size", "64", "--out", &s("data")])?;
        glod(&[
            "train", "--data", &s("data"), "--out", &s("model"), "--model", "toy", "--seed", "3", "--steps", "40", "--lr", "4e-3",
            "--micro-batch", "2", "--accum", "2", "--checkpoint-every", "15",
        ])?;
        glod(&["eval", "--data", &s("data"), "--checkpoint", &s("model/checkpoint.gckpt"), "--split", "train", "--out", &s("eval")])?;
        trees.push([tree(&root.join("data"))?, tree(&root.join("model"))?, tree(&root.join("eval"))?]);
    }
    let same: Vec<bool> = (0..3).map(|i| trees[0][i] == trees[1][i]).collect();
    let files: usize = trees[0].iter().map(BTreeMap::len).sum();
    let metrics = String::from_utf8(trees[0][2].get("metrics.csv").cloned().unwrap_or_default())?;
    if let Some(mean) = metrics.lines().find(|l| l.starts_with("mean,")) {
        let f: Vec<f64> = mean.split(',').skip(1).take(2).filter_map(|v| v.parse().ok()).collect();
        if let [m50, m75] = f[..] {
            results.push(EvalResult { classes: vec![], map50: m50, map75: m75, psnr: 0.0 });
        }
    }
    Ok((same.iter().all(|&b| b), format!("bitwise identical over {files} files: gen {}, train {}, eval {}", same[0], same[1], same[2])))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut r = Runner { filters, failed: Vec::new(), ran: 0 };
    let mut evals: Vec<EvalResult> = Vec::new();

    r.run("oracle equivalence", oracles);
    r.run("loss spot values", loss_spots);
    r.run("encode-decode round trip", round_trip);
    r.run("gradient correctness", gradients);

    if r.wants("overfit") || r.wants("kernel trend") {
        let setup = OverfitSetup::desk();
        let start = Instant::now();
        match overfit(&setup) {
            Ok(run) => {
                let secs = start.elapsed().as_secs_f64();
                evals.push(run.arm.result.clone());
                r.run("overfit", || overfit_check(&run, secs));
                r.run("kernel trend", || kernel_trend(&run, &setup));
            }
            Err(e) => {
                r.report("overfit", Err(e.into()), start.elapsed());
                r.report("kernel trend", Ok((false, "no overfit model".into())), Duration::ZERO);
            }
        }
    }

    r.run("fusion ablation direction", || fusion(&mut evals));
    r.run("determinism", || determinism(&mut evals));
    r.run("psnr arithmetic", || psnr(&evals));

    println!("{} of {} criteria passed", r.ran - r.failed.len(), r.ran);
    if !r.failed.is_empty() {
        println!("failed: {}", r.failed.join(", "));
        std::process::exit(1);
    }
}
