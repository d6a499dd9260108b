//! Finite-difference verification of every neck block, windowed attention
//! and the full network at real64.

use glod_tensor::{relative_error, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::{fusion_block, highway, AsymmetricFusion, Cbam, UpConvMixer};
use crate::encoder::WindowAttention;
use crate::error::Result;
use crate::net::{Glod, GlodConfig};
use crate::params::{Ctx, Mode, ParamStore};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference steps tried per entry. The larger one is robust to
/// round-off on tiny gradients; the smaller one rarely straddles a ReLU or
/// max-pool switch point. The closer estimate is kept.
pub const FD_STEPS: [f64; 2] = [1e-4, 1e-5];

/// Worst entry over every input and parameter tensor of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_err: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'a;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape.to_vec(), |_| n.sample(rng))
}

struct EntryReport {
    max_rel_err: f64,
    analytic: f64,
    numeric: f64,
    checked: usize,
}

fn fd_entries(x: &Tensor<f64>, analytic: &Tensor<f64>, idx: &[usize], mut f: impl FnMut(&Tensor<f64>) -> f64) -> EntryReport {
    let mut report = EntryReport { max_rel_err: 0.0, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = x.clone();
    for &i in idx {
        let orig = probe.data()[i];
        let a = analytic.data()[i];
        let mut best = (f64::INFINITY, f64::NAN);
        for h in FD_STEPS {
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            if err < best.0 || best.1.is_nan() {
                best = (err, numeric);
            }
        }
        probe.data_mut()[i] = orig;
        report.checked += 1;
        if best.0 > report.max_rel_err || best.0.is_nan() {
            report.max_rel_err = best.0;
            report.analytic = a;
            report.numeric = best.1;
        }
    }
    report
}

/// `sum(r * build(inputs))` for fixed random `r`, with gradients of every
/// input and parameter when `grads` is set.
fn objective(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    build: &Build<'_>,
    grads: bool,
) -> Result<(f64, Vec<Tensor<f64>>, Vec<(String, Tensor<f64>)>)> {
    let mut cx = Ctx::new(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.input(t.clone())).collect();
    let y = build(&mut cx, &vars)?;
    let r = cx.constant(weights.clone());
    let p = cx.graph.mul(y, r)?;
    let loss = cx.graph.sum(p);
    let value = cx.graph.value(loss).item();
    if !grads {
        return Ok((value, Vec::new(), Vec::new()));
    }
    let g = cx.graph.backward(loss)?;
    let input_grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, input_grads, g.into_params()))
}

/// Checks up to `per_tensor` random entries of every input and parameter of
/// `build`, after initializing parameters from `seed` and jittering the
/// all of them so small-scale initializations such as the attention
/// projections do not leave gradients near the finite-difference noise floor.
pub fn check_block(
    block: &str,
    input_shapes: &[&[usize]],
    seed: u64,
    per_tensor: usize,
    build: &Build<'_>,
) -> Result<BlockCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| random(s, &mut rng)).collect();
    let mut store = ParamStore::new();
    let out_shape = {
        let mut cx = Ctx::initializing(&mut store, Mode::Train, seed);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.input(t.clone())).collect();
        let y = build(&mut cx, &vars)?;
        cx.graph.shape(y).to_vec()
    };
    let jitter = Normal::new(0.0, 0.1).expect("positive std");
    for (_, p) in store.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
    }
    let weights = random(&out_shape, &mut rng);
    let (_, input_grads, param_grads) = objective(&mut store, &inputs, &weights, build, true)?;

    let mut report = BlockCheck { block: block.to_string(), max_rel_err: 0.0, worst: String::new(), checked: 0 };
    let pick = |n: usize, rng: &mut ChaCha8Rng| sample(rng, n, per_tensor.min(n)).into_vec();
    let absorb = |report: &mut BlockCheck, name: String, r: EntryReport| {
        report.checked += r.checked;
        if r.max_rel_err > report.max_rel_err || r.max_rel_err.is_nan() {
            report.max_rel_err = r.max_rel_err;
            report.worst = format!("{name} a={} n={}", r.analytic, r.numeric);
        }
    };
    for (i, (x, g)) in inputs.iter().zip(&input_grads).enumerate() {
        let idx = pick(x.numel(), &mut rng);
        let mut probe_inputs = inputs.clone();
        let r = fd_entries(x, g, &idx, |t| {
            probe_inputs[i] = t.clone();
            objective(&mut store, &probe_inputs, &weights, build, false).map_or(f64::NAN, |o| o.0)
        });
        absorb(&mut report, format!("input{i}"), r);
    }
    for (name, g) in &param_grads {
        let original = store.param(name).expect("gradient of a stored parameter").clone();
        let idx = pick(original.numel(), &mut rng);
        let r = fd_entries(&original, g, &idx, |t| {
            *store.param_mut(name).expect("present") = t.clone();
            objective(&mut store, &inputs, &weights, build, false).map_or(f64::NAN, |o| o.0)
        });
        *store.param_mut(name).expect("present") = original;
        absorb(&mut report, name.clone(), r);
    }
    Ok(report)
}

/// The whole network under `config`, all three head branches concatenated.
pub fn check_network(config: GlodConfig, seed: u64, per_tensor: usize) -> Result<BlockCheck> {
    let side = config.image_size;
    let channels = config.encoder.in_channels;
    let model = Glod::new(config)?;
    check_block("glod_net", &[&[channels, side, side]], seed, per_tensor, &|cx, v| {
        let head = model.forward(cx, v[0])?;
        let parts = [head.heatmap, head.offset, head.size];
        Ok(cx.graph.concat(&parts, 0)?)
    })
}

/// The full suite: asymmetric fusion, a three-step UpConvMixer, CBAM,
/// highway, fusion block, plain and shifted window attention, and the
/// whole network at the toy preset.
pub fn run_suite(seed: u64, per_tensor: usize) -> Result<Vec<BlockCheck>> {
    let mut out = Vec::new();
    out.push(check_block("asymmetric_fusion", &[&[3, 6, 6], &[2, 6, 6]], seed, per_tensor, &|cx, v| {
        AsymmetricFusion { out_channels: 4 }.forward(cx, "af", v[0], v[1])
    })?);
    out.push(check_block("upconvmixer", &[&[4, 4, 4], &[4, 4, 4]], seed, per_tensor, &|cx, v| {
        UpConvMixer::new(8, 3, 4).forward(cx, "ucm", v[0], v[1])
    })?);
    out.push(check_block("cbam", &[&[8, 5, 5]], seed, per_tensor, &|cx, v| Cbam { reduction: 4 }.forward(cx, "cbam", v[0]))?);
    out.push(check_block("highway", &[&[3, 4, 4], &[3, 4, 4]], seed, per_tensor, &|cx, v| highway(cx, "hw", v[0], v[1]))?);
    out.push(check_block("fusion_block", &[&[4, 3, 3], &[3, 6, 6]], seed, per_tensor, &|cx, v| {
        fusion_block(cx, "fb", v[0], v[1])
    })?);
    out.push(check_block("window_attention", &[&[8, 4, 4]], seed, per_tensor, &|cx, v| {
        WindowAttention { heads: 2, window: 2, shift: 0 }.forward(cx, "wa", v[0])
    })?);
    out.push(check_block("window_attention_shifted", &[&[8, 4, 4]], seed, per_tensor, &|cx, v| {
        WindowAttention { heads: 2, window: 2, shift: 1 }.forward(cx, "wa", v[0])
    })?);
    out.push(check_network(GlodConfig::toy(), seed, per_tensor)?);
    Ok(out)
}
