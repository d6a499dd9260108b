//! `glod`: generate synthetic data, train, evaluate, decode single images
//! and run the ablations.

mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glod_core::checkpoint::Checkpoint;
use glod_core::data::{generate_dataset, normalize, read_ppm, write_ppm, AugmentConfig, Dataset, NormalizeConfig, SceneSpec, Split};
use glod_core::decode::DecodeConfig;
use glod_core::eval::{detect, evaluate_heads, predict_samples, DecodeMode};
use glod_core::experiments::{fusion_ablation, kernel_csv, kernel_sweep, AblationSetup, FUSION_CSV_HEADER};
use glod_core::gradcheck::{run_suite, GRADCHECK_TOLERANCE};
use glod_core::metrics::ImageMap;
use glod_core::train::{Sample, TrainConfig, Trainer, CHECKPOINT_FILE};
use glod_core::{Glod, GlodConfig};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "glod", version, about = "Center-point object detector for overhead imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Detect objects in one PPM image and render the boxes.
    Decode(DecodeArgs),
    /// Train with and without fusion blocks and compare mAP.
    AblateFusion(AblateFusionArgs),
    /// Count retained detections per local-maxima window.
    AblateKernel(AblateKernelArgs),
    /// Finite-difference gradient checks at double precision.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layout {
    /// Object sizes fixed in pixels.
    Desk,
    /// Object sizes scaled with the image.
    Scaled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Toy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, value_enum, default_value_t = Layout::Desk)]
    layout: Layout,
}

/// Schedule overrides shared by `train` and `ablate-fusion`.
#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    cycle_epochs: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
}

impl ScheduleArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.optim.lr = self.lr.unwrap_or(cfg.optim.lr);
        cfg.cycle_epochs = self.cycle_epochs.unwrap_or(cfg.cycle_epochs);
        cfg.micro_batch = self.micro_batch.unwrap_or(cfg.micro_batch);
        cfg.accum = self.accum.unwrap_or(cfg.accum);
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Architecture preset; input size and class count follow the data.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    model: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    fusion: Switch,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Continue from the checkpoint in `--out` if there is one.
    #[arg(long)]
    resume: bool,
}

/// Decoding options shared by `eval`, `decode` and `ablate-kernel`.
#[derive(Args, Debug)]
struct DecodeOpts {
    /// One value decodes with that window; several merge their detections.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    ps: Vec<usize>,
    #[arg(long)]
    score_thresh: Option<f32>,
    #[arg(long, default_value_t = 1000)]
    top_k: usize,
}

impl DecodeOpts {
    fn config(&self, default_thresh: f32) -> (DecodeConfig, DecodeMode) {
        let mut cfg = DecodeConfig { top_k: self.top_k, score_threshold: self.score_thresh.unwrap_or(default_thresh), ..DecodeConfig::default() };
        let mode = match self.ps.as_slice() {
            [p] => {
                cfg.p = *p;
                DecodeMode::Single(*p)
            }
            ps => {
                cfg.merge_ps = ps.to_vec();
                DecodeMode::Merged
            }
        };
        (cfg, mode)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[command(flatten)]
    decode: DecodeOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    decode: DecodeOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateFusionArgs {
    /// First training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateKernelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,20")]
    ps: Vec<usize>,
    /// Windows merged for the extra `merged` file.
    #[arg(long, value_delimiter = ',', default_value = "0,1,10,20")]
    merge_ps: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    score_thresh: f32,
    #[arg(long, default_value_t = 1000)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries checked per tensor.
    #[arg(long, default_value_t = 4)]
    per_tensor: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode(a),
        Command::AblateFusion(a) => ablate_fusion(a),
        Command::AblateKernel(a) => ablate_kernel(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = match a.layout {
        Layout::Desk => SceneSpec::desk(a.size),
        Layout::Scaled => SceneSpec::scaled(a.size),
    };
    let ds = generate_dataset(&a.out, a.images, a.seed, &spec)?;
    let objects: usize = ds.annotations.values().map(Vec::len).sum();
    info!("wrote {} images with {objects} objects to {}", a.images, a.out.display());
    Ok(())
}

fn load_samples(ds: &Dataset, split: Split) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> =
        ds.load_split(split)?.into_iter().map(|(id, image, objects)| Sample { id, image, objects }).collect();
    if samples.is_empty() {
        bail!("{} has no {} images", ds.root.display(), split.as_str());
    }
    Ok(samples)
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let samples = load_samples(&ds, Split::Train)?;
    let side = samples[0].image.shape()[1];
    let base = match a.model {
        Preset::Desk => GlodConfig::desk(),
        Preset::Toy => GlodConfig::toy(),
    };
    let config = GlodConfig { image_size: side, num_classes: ds.num_classes(), fusion: matches!(a.fusion, Switch::On), ..base };
    let mut cfg = TrainConfig { seed: a.seed, ..TrainConfig::default() };
    a.schedule.apply(&mut cfg);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    if a.no_augment {
        cfg.augment = AugmentConfig::disabled();
    }
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ck_path.exists() {
        let ck = Checkpoint::<f32>::load(&ck_path)?;
        if ck.config()? != config {
            bail!("checkpoint {} was trained with a different model", ck_path.display());
        }
        Trainer::resume(&ck, cfg.clone(), samples)?
    } else {
        Trainer::new(Glod::new(config)?, cfg.clone(), samples)?
    };
    let start = Instant::now();
    let every = (cfg.steps / 20).max(1);
    trainer.run(Some(&a.out), |l| {
        if l.step % every == 0 || l.step + 1 == cfg.steps {
            info!("step {} lr {:.3e} loss {:.4} (cls {:.4} off {:.4} size {:.4})", l.step, l.lr, l.loss.total, l.loss.cls, l.loss.off, l.loss.size);
        }
    })?;
    info!("trained {} steps in {:.1?}; checkpoint {}", cfg.steps, start.elapsed(), ck_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Glod, glod_core::ParamStore<f32>)> {
    let ck = Checkpoint::<f32>::load(path)?;
    Ok((Glod::new(ck.config()?)?, ck.store()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (model, mut store) = load_model(&a.checkpoint)?;
    if ds.num_classes() != model.config.num_classes {
        bail!("dataset has {} classes, model has {}", ds.num_classes(), model.config.num_classes);
    }
    let samples = load_samples(&ds, a.split.into())?;
    let heads = predict_samples(&model, &mut store, &samples, &NormalizeConfig::default())?;
    let (cfg, mode) = a.decode.config(DecodeConfig::default().score_threshold);
    let (result, dets) = evaluate_heads(&model, &samples, &heads, &cfg, mode)?;
    create_dir(&a.out)?;
    write(&a.out.join("detections.tsv"), &render::detections_tsv(&dets))?;
    let csv = result.to_csv();
    write(&a.out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    let image = read_ppm(&a.image)?;
    let side = model.config.image_size;
    if image.shape()[1..] != [side, side] {
        bail!("model expects {side}x{side} images, {} is {}x{}", a.image.display(), image.shape()[2], image.shape()[1]);
    }
    let x = normalize(&image, &NormalizeConfig::default())?;
    let head = model.predict(&mut store, &x)?;
    let (cfg, mode) = a.decode.config(0.3);
    let cfg = DecodeConfig { output_stride: model.config.output_stride, ..cfg };
    let dets = detect(&head, &cfg, mode);
    create_dir(&a.out)?;
    let map: ImageMap<_> = [(0, dets.clone())].into_iter().collect();
    write(&a.out.join("detections.tsv"), &render::detections_tsv(&map))?;
    write_ppm(&a.out.join("render.ppm"), &render::draw_boxes(&image, &dets))?;
    info!("{} detections written to {}", dets.len(), a.out.display());
    Ok(())
}

fn ablate_fusion(a: AblateFusionArgs) -> Result<()> {
    let mut setup = AblationSetup::desk();
    setup.scenes = a.images;
    setup.dataset_seed = a.data_seed;
    a.schedule.apply(&mut setup.train);
    let (train, val) = setup.samples()?;
    create_dir(&a.out)?;
    let mut csv = format!("{FUSION_CSV_HEADER}\n");
    let mut wins = (0, 0);
    for seed in a.seed..a.seed + a.seeds {
        let start = Instant::now();
        let (run, _) = fusion_ablation(&setup, seed, &train, &val)?;
        let (w50, w75) = run.on_at_least_off();
        wins.0 += w50 as u64;
        wins.1 += w75 as u64;
        info!("seed {seed}: on {:.4}/{:.4}, off {:.4}/{:.4} ({:.1?})", run.on.map50, run.on.map75, run.off.map50, run.off.map75, start.elapsed());
        csv.push_str(&run.csv_line());
        csv.push('\n');
        write(&a.out.join("fusion.csv"), &csv)?;
    }
    print!("{csv}");
    info!("fusion on >= off: mAP50 in {}/{} seeds, mAP75 in {}/{}", wins.0, a.seeds, wins.1, a.seeds);
    Ok(())
}

fn ablate_kernel(a: AblateKernelArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (model, mut store) = load_model(&a.checkpoint)?;
    let samples = load_samples(&ds, a.split.into())?;
    let heads = predict_samples(&model, &mut store, &samples, &NormalizeConfig::default())?;
    let cfg = DecodeConfig {
        top_k: a.top_k,
        score_threshold: a.score_thresh,
        merge_ps: a.merge_ps,
        output_stride: model.config.output_stride,
        ..DecodeConfig::default()
    };
    let sweep = kernel_sweep(model.config.num_classes, &samples, &heads, &cfg, &a.ps);
    create_dir(&a.out)?;
    let csv = kernel_csv(&sweep.rows, &ds.classes);
    write(&a.out.join("kernel.csv"), &csv)?;
    write(&a.out.join("merged.csv"), &kernel_csv(std::slice::from_ref(&sweep.merged), &ds.classes))?;
    print!("{csv}");
    info!("merged recall {:.4}", sweep.merged.recall);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let checks = run_suite(a.seed, a.per_tensor)?;
    println!("block,max_rel_err,checked,worst,status");
    for c in &checks {
        println!("{},{:.3e},{},{},{}", c.block, c.max_rel_err, c.checked, c.worst, if c.passed() { "ok" } else { "FAIL" });
    }
    info!("suite finished in {:.1?}", start.elapsed());
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        bail!("{failed} blocks exceed relative error {GRADCHECK_TOLERANCE:e}");
    }
    Ok(())
}
