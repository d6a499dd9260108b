use glod_core::checkpoint::Checkpoint;
use glod_core::gradcheck::{check_block, GRADCHECK_TOLERANCE};
use glod_core::net::parameter_count;
use glod_core::params::{Ctx, Mode};
use glod_core::{Glod, GlodConfig, ParamStore};
use glod_tensor::ops::ConvSpec;
use glod_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![3, side, side], |_| rng.gen_range(-2.0..2.0))
}

#[test]
fn desk_output_shapes_with_and_without_fusion() {
    for fusion in [true, false] {
        let model = Glod::new(GlodConfig { fusion, ..GlodConfig::desk() }).unwrap();
        let mut store = model.init::<f32>(1).unwrap();
        let out = model.predict(&mut store, &image(128, 2)).unwrap();
        assert_eq!(out.heatmap.shape(), [5, 32, 32]);
        assert_eq!(out.offset.shape(), [2, 32, 32]);
        assert_eq!(out.size.shape(), [2, 32, 32]);
        assert!(out.heatmap.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.size.data().iter().all(|&v| v > 0.0));
        let mean = out.heatmap.mean();
        assert!((0.005..=0.02).contains(&mean), "initial heatmap mean {mean}");
    }
}

#[test]
fn parameter_counts() {
    let mut store = ParamStore::<f32>::new();
    {
        let mut cx = Ctx::initializing(&mut store, Mode::Eval, 0);
        let x = cx.input(Tensor::zeros(vec![2, 4, 4]));
        cx.conv("pw", x, 3, ConvSpec::pointwise(), Some(glod_core::params::Init::Zeros)).unwrap();
    }
    assert_eq!(store.scalar_count(), 9);
    let base = GlodConfig::toy();
    let wide = GlodConfig { head_width: base.head_width * 2, ..base.clone() };
    assert!(parameter_count(&wide).unwrap() > parameter_count(&base).unwrap());
    let off = GlodConfig { fusion: false, ..base.clone() };
    assert!(parameter_count(&off).unwrap() < parameter_count(&base).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = Glod::new(GlodConfig::toy()).unwrap();
    let mut store = model.init::<f32>(5).unwrap();
    let img = image(64, 6);
    let before = model.predict(&mut store, &img).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gckpt");
    Checkpoint::from_model(&model.config, &store, "").save(&path).unwrap();
    let ck = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(ck.config().unwrap(), model.config);
    let mut loaded = ck.store();
    assert_eq!(loaded.scalar_count(), parameter_count(&model.config).unwrap());
    let after = model.predict(&mut loaded, &img).unwrap();
    for (a, b) in [(&before.heatmap, &after.heatmap), (&before.offset, &after.offset), (&before.size, &after.size)] {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn same_seed_same_init_across_fusion_switch() {
    let on = Glod::new(GlodConfig::toy()).unwrap().init::<f32>(9).unwrap();
    let off = Glod::new(GlodConfig { fusion: false, ..GlodConfig::toy() }).unwrap().init::<f32>(9).unwrap();
    for (name, p) in off.params() {
        assert_eq!(on.param(name), Some(p), "{name}");
    }
}

#[test]
fn without_fusion_every_parameter_is_live() {
    let cfg = GlodConfig { fusion: false, ..GlodConfig::gradcheck() };
    let side = cfg.image_size;
    let model = Glod::new(cfg).unwrap();
    let mut store = model.init::<f64>(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (_, p) in store.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let img = image(side, 4).cast::<f64>();
    let objective = |store: &mut ParamStore<f64>| {
        let mut cx = Ctx::new(store, Mode::Train);
        let x = cx.constant(img.clone());
        let h = model.forward(&mut cx, x).unwrap();
        let parts = [h.heatmap, h.offset, h.size];
        let y = cx.graph.concat(&parts, 0).unwrap();
        let w = cx.constant(Tensor::from_fn(cx.graph.shape(y).to_vec(), |i| ((i * 7919) % 13) as f64 - 6.0));
        let p = cx.graph.mul(y, w).unwrap();
        cx.graph.sum(p)
            .pipe(|l| (cx.graph.value(l).item(), cx.graph.backward(l).unwrap().into_params()))
    };
    let (base, grads) = objective(&mut store);
    assert_eq!(grads.len(), store.param_names().count());
    let names: Vec<String> = store.param_names().map(String::from).collect();
    for (name, g) in &grads {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
    // Finite-difference sensitivity on a sample, including encoder stage 1.
    let picks: Vec<&String> = names.iter().filter(|n| n.contains("stages.0") || rng.gen_bool(0.1)).collect();
    for name in picks {
        let g = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        let i = (0..g.numel()).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
        let orig = store.param(name).unwrap().data()[i];
        store.param_mut(name).unwrap().data_mut()[i] = orig + 1e-4;
        let (moved, _) = objective(&mut store);
        store.param_mut(name).unwrap().data_mut()[i] = orig;
        assert!((moved - base).abs() > 0.0, "{name} is dead");
    }
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

#[test]
fn neck_blocks_pass_finite_differences() {
    use glod_core::blocks::{fusion_block, highway, AsymmetricFusion, Cbam, UpConvMixer};
    use glod_core::encoder::WindowAttention;
    let checks = [
        check_block("af", &[&[2, 5, 5], &[2, 5, 5]], 1, 4, &|cx, v| AsymmetricFusion { out_channels: 3 }.forward(cx, "af", v[0], v[1])).unwrap(),
        check_block("ucm", &[&[4, 4, 4], &[4, 4, 4]], 1, 4, &|cx, v| UpConvMixer::new(8, 3, 4).forward(cx, "u", v[0], v[1])).unwrap(),
        check_block("cbam", &[&[4, 4, 4]], 1, 4, &|cx, v| Cbam { reduction: 2 }.forward(cx, "c", v[0])).unwrap(),
        check_block("hw", &[&[2, 3, 3], &[2, 3, 3]], 1, 4, &|cx, v| highway(cx, "h", v[0], v[1])).unwrap(),
        check_block("fb", &[&[2, 2, 2], &[3, 8, 8]], 1, 4, &|cx, v| fusion_block(cx, "f", v[0], v[1])).unwrap(),
        check_block("wa", &[&[4, 4, 4]], 1, 4, &|cx, v| WindowAttention { heads: 2, window: 2, shift: 1 }.forward(cx, "w", v[0])).unwrap(),
    ];
    for c in checks {
        assert!(c.max_rel_err < GRADCHECK_TOLERANCE, "{c:?}");
    }
}
