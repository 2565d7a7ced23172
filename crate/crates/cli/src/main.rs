//! `voltrain`: phantom synthesis, dataset generation, training, rendering,
//! evaluation and gradient self-checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use voltrain::camera::Camera;
use voltrain::dvr::RenderConfig;
use voltrain::error::{read_json, write_json};
use voltrain::grid::{load_volume_file, save_volume, synth_volume, ScalarType, SceneRecipe};
use voltrain::loss::LossMode;
use voltrain::tf::{preset_bins, TransferFunction, DEFAULT_KAPPA_MAX};
use voltrain::train::{
    evaluate, gradient_check, make_dataset, train, Checkpoint, Dataset, DatasetSpec, ModelKind, Sampling, Split,
    TrainConfig, DEFAULT_CAMERA_RADIUS, DEFAULT_S_EVAL, DEFAULT_S_RENDER,
};
use voltrain::Error;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\npackage: ",
    env!("CARGO_PKG_NAME"),
    "\nprecision: f64, deterministic with --threads 1"
);

#[derive(Parser, Debug)]
#[command(name = "voltrain", version, long_version = LONG_VERSION, about = "Differentiable volume rendering and transfer-function training")]
struct Cli {
    /// Worker threads; 1 makes every command fully deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize a phantom recipe into a raw volume with a manifest.
    SynthVolume(SynthArgs),
    /// Render ground-truth views of a volume with a transfer function.
    MakeDataset(DatasetArgs),
    /// Optimize a model against a dataset.
    Train(TrainArgs),
    /// Render a checkpoint from a camera.
    Render(RenderArgs),
    /// Compare analytic and finite-difference gradients on tiny scenes.
    Gradcheck(GradcheckArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Recipe JSON file or preset name (three-shells, twins, twins-labels).
    #[arg(long)]
    spec: String,
    /// Output volume manifest.
    #[arg(long)]
    out: PathBuf,
    /// Voxels per axis.
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dtype {
    U8,
    U16,
    F32,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Volume manifest the models will see.
    #[arg(long)]
    volume: PathBuf,
    /// Volume the targets are rendered from (defaults to --volume).
    #[arg(long)]
    render_volume: Option<PathBuf>,
    /// Transfer-function JSON file or preset name (shells, twins, ramp).
    #[arg(long)]
    tf: String,
    #[arg(long, default_value_t = 32)]
    views: usize,
    /// Resolution as WxH.
    #[arg(long, default_value = "128x128", value_parser = parse_res)]
    res: (usize, usize),
    /// View counts per split as train/val[/test].
    #[arg(long, default_value = "25/7", value_parser = parse_split)]
    split: SplitCounts,
    #[arg(long, default_value_t = DEFAULT_S_RENDER)]
    s_render: f64,
    /// Background as r,g,b.
    #[arg(long, default_value = "0,0,0", value_parser = parse_rgb)]
    background: [f64; 3],
    #[arg(long, default_value_t = DEFAULT_CAMERA_RADIUS)]
    radius: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Mse,
    MseSsim,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum ModelArg {
    Lookup,
    MlpTf,
    Latent,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Lookup => ModelKind::Lookup,
            ModelArg::MlpTf => ModelKind::MlpTf,
            ModelArg::Latent => ModelKind::Latent,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// TrainConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for checkpoint and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stepsize annealing as s_l:s_h.
    #[arg(long, conflicts_with = "s", value_parser = parse_anneal)]
    anneal: Option<(f64, f64)>,
    /// Fixed sampling rate.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long, value_enum)]
    jitter: Option<Toggle>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera JSON (inline or file) or a view index into --dataset.
    #[arg(long)]
    camera: String,
    /// Dataset supplying views, volume and background.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Volume manifest (overrides the dataset's).
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long, default_value = "256x256", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = DEFAULT_S_EVAL)]
    s: f64,
    /// Background as r,g,b (defaults to the dataset's, else black).
    #[arg(long, value_parser = parse_rgb)]
    background: Option<[f64; 3]>,
    /// Output image (.png or .pfm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum SceneArg {
    Tiny,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum CheckModel {
    Lookup,
    MlpTf,
    Latent,
    All,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = SceneArg::Tiny)]
    scene: SceneArg,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = CheckModel::All)]
    model: CheckModel,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = DEFAULT_S_EVAL)]
    s: f64,
    /// JSON report path (defaults to eval_<split>.json next to the checkpoint).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

#[derive(Clone, Debug)]
struct SplitCounts(Vec<usize>);

fn parse_split(s: &str) -> Result<SplitCounts, String> {
    let parts: Result<Vec<usize>, _> = s.split('/').map(str::parse).collect();
    let parts = parts.map_err(|_| format!("bad split {s:?}"))?;
    if !(2..=3).contains(&parts.len()) {
        return Err("expected A/B or A/B/C".into());
    }
    Ok(SplitCounts(parts))
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|x| x.trim().parse()).collect();
    match v.map_err(|_| format!("bad color {s:?}"))?.as_slice() {
        &[r, g, b] => Ok([r, g, b]),
        _ => Err("expected r,g,b".into()),
    }
}

fn parse_anneal(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected s_l:s_h")?;
    let a = a.parse().map_err(|_| format!("bad s_l {a:?}"))?;
    let b = b.parse().map_err(|_| format!("bad s_h {b:?}"))?;
    Ok((a, b))
}

/// Marks an error as a failed check rather than a usage problem.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        Some(
            Error::Config(_)
            | Error::Manifest(_)
            | Error::Recipe(_)
            | Error::Camera(_)
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Format(_)
            | Error::Tf(_)
            | Error::Checkpoint(_)
            | Error::ImageTooSmall { .. },
        ) => 2,
        _ => 1,
    }
}

fn effective(name: &str, value: serde_json::Value) {
    eprintln!("effective config ({name}): {value}");
}

fn synth_volume_cmd(args: &SynthArgs) -> Result<()> {
    let recipe = match SceneRecipe::preset(&args.spec) {
        Some(r) if !Path::new(&args.spec).exists() => r,
        _ => read_json(Path::new(&args.spec))?,
    };
    let dtype = match args.dtype {
        Dtype::U8 => ScalarType::U8,
        Dtype::U16 => ScalarType::U16,
        Dtype::F32 => ScalarType::F32,
    };
    effective("synth-volume", json!({"spec": args.spec, "dims": args.dims, "dtype": dtype, "out": args.out}));
    let vol = synth_volume(&recipe, [args.dims; 3], [1.0; 3])?;
    save_volume(&vol, &args.out, dtype)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

fn make_dataset_cmd(args: &DatasetArgs, seed: u64) -> Result<()> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let tf_path = match preset_bins(&args.tf) {
        Some(bins) if !Path::new(&args.tf).exists() => {
            let p = args.out.join("preset_tf.json");
            TransferFunction::lookup(&bins, DEFAULT_KAPPA_MAX)?.save(&p)?;
            p
        }
        _ => PathBuf::from(&args.tf),
    };
    let spec = DatasetSpec {
        volume: args.volume.clone(),
        render_volume: args.render_volume.clone(),
        tf: tf_path,
        views: args.views,
        width: args.res.0,
        height: args.res.1,
        s_render: args.s_render,
        splits: args.split.0.clone(),
        background: args.background,
        seed,
        radius: args.radius,
        out_dir: args.out.clone(),
    };
    effective("make-dataset", json!({
        "volume": spec.volume, "render_volume": spec.render_volume, "tf": spec.tf, "views": spec.views,
        "width": spec.width, "height": spec.height, "s_render": spec.s_render, "splits": spec.splits,
        "background": spec.background, "seed": seed, "radius": spec.radius, "out": spec.out_dir,
    }));
    let (path, _) = make_dataset(&spec)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train_config(args: &TrainArgs, seed: u64, deterministic: bool) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => {
            let kind = args.model.ok_or_else(|| Error::Config("--model or --config is required".into()))?;
            let dataset = args.dataset.clone().ok_or_else(|| Error::Config("--dataset is required".into()))?;
            let out = args.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
            let mut c = TrainConfig::new(kind.into(), dataset, out);
            c.seed = seed;
            c
        }
    };
    if let Some(m) = args.model {
        cfg.model.kind = m.into();
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some((s_l, s_h)) = args.anneal {
        cfg.sampling = Sampling::Annealed { s_l, s_h };
    }
    if let Some(s) = args.s {
        cfg.sampling = Sampling::Fixed { s };
    }
    if let Some(j) = args.jitter {
        cfg.jitter = matches!(j, Toggle::On);
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.lr.is_some() {
        cfg.lr = args.lr;
    }
    if args.batch_size.is_some() {
        cfg.batch_size = args.batch_size;
    }
    if let Some(l) = args.loss {
        cfg.loss = match l {
            LossArg::Mse => LossMode::Mse,
            LossArg::MseSsim => LossMode::MseSsim,
        };
    }
    if args.config.is_some() && seed != 0 {
        cfg.seed = seed;
    }
    cfg.deterministic |= deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(args: &TrainArgs, seed: u64, deterministic: bool) -> Result<()> {
    let cfg = train_config(args, seed, deterministic)?;
    let mut shown = serde_json::to_value(&cfg)?;
    shown["effective_lr"] = json!(cfg.effective_lr());
    shown["effective_batch_size"] = json!(cfg.effective_batch_size());
    effective("train", shown);
    let report = train(&cfg)?;
    log::info!(
        "best val SSIM {:.4} at epoch {}; checkpoint {}",
        report.best.val_ssim,
        report.best.epoch,
        report.checkpoint.display()
    );
    Ok(())
}

fn parse_camera(spec: &str, dataset: Option<&Dataset>) -> Result<Camera> {
    if let Ok(i) = spec.parse::<usize>() {
        let ds = dataset.ok_or_else(|| Error::Config("a camera index needs --dataset".into()))?;
        let n = ds.manifest.views.len();
        if i >= n {
            return Err(Error::Config(format!("camera index {i} out of range for {n} views")).into());
        }
        return Ok(ds.camera(i));
    }
    let text = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        std::fs::read_to_string(spec).map_err(|e| Error::Io { path: spec.into(), source: e })?
    };
    let cam: Camera = serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad camera: {e}")))?;
    cam.validate()?;
    Ok(cam)
}

fn render_cmd(args: &RenderArgs, seed: u64) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let dataset = args.dataset.as_deref().map(Dataset::load).transpose()?;
    let camera = parse_camera(&args.camera, dataset.as_ref())?;
    let volume = match (&args.volume, &dataset) {
        (Some(v), _) => load_volume_file(v)?,
        (None, Some(ds)) => ds.volume.clone(),
        (None, None) => bail!(Error::Config("--volume or --dataset is required".into())),
    };
    let mut cfg = RenderConfig::new(args.res.0, args.res.1, args.s);
    cfg.background = args
        .background
        .or(dataset.as_ref().map(|d| d.manifest.background))
        .unwrap_or([0.0; 3]);
    effective("render", json!({
        "checkpoint": args.checkpoint, "camera": camera, "width": cfg.width, "height": cfg.height,
        "s": cfg.s, "background": cfg.background, "out": args.out, "seed": seed,
    }));
    let img = model.render(&volume, &camera, &cfg, seed)?;
    match args.out.extension().and_then(|e| e.to_str()) {
        Some("pfm") => img.take_channels(3)?.save_pfm(&args.out)?,
        _ => img.save(&args.out)?,
    }
    log::info!("wrote {}", args.out.display());
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs, seed: u64) -> Result<()> {
    let kinds: Vec<ModelKind> = match args.model {
        CheckModel::Lookup => vec![ModelKind::Lookup],
        CheckModel::MlpTf => vec![ModelKind::MlpTf],
        CheckModel::Latent => vec![ModelKind::Latent],
        CheckModel::All => vec![ModelKind::Lookup, ModelKind::MlpTf, ModelKind::Latent],
    };
    effective("gradcheck", json!({"scene": "tiny", "eps": args.eps, "tol": args.tol, "seed": seed,
        "models": kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>()}));
    let mut worst: f64 = 0.0;
    for kind in kinds {
        let r = gradient_check(kind, seed, args.eps)?;
        println!(
            "{kind}: max relative error {:.3e} over {} parameters ({} kinked, {} below noise)",
            r.max_rel_error,
            r.checked,
            r.excluded.len(),
            r.below_noise.len()
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst < args.tol {
        Ok(())
    } else {
        Err(CheckFailed(format!("max relative error {worst:.3e} exceeds {:.1e}", args.tol)).into())
    }
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    let ds = Dataset::load(&args.dataset)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("eval_{split}.json"))
    });
    effective("eval", json!({"checkpoint": args.checkpoint, "dataset": args.dataset, "split": split,
        "s": args.s, "report": report_path}));
    let report = evaluate(&model, &ds, split, args.s)?;
    println!("{:>6}  {:>8}  {:>10}", "view", "ssim", "mse");
    for v in &report.views {
        println!("{:>6}  {:>8.4}  {:>10.3e}", v.index, v.ssim, v.mse);
    }
    println!("{:>6}  {:>8.4}  {:>10.3e}", "mean", report.mean_ssim, report.mean_mse);
    write_json(&report_path, &report)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let deterministic = cli.threads == Some(1);
    match &cli.command {
        Command::SynthVolume(a) => synth_volume_cmd(a),
        Command::MakeDataset(a) => make_dataset_cmd(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed, deterministic),
        Command::Render(a) => render_cmd(a, cli.seed),
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.seed),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
