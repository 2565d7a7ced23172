//! Optimization harness: Adam, the sampling-rate schedule, dataset
//! generation, the epoch loop with best-checkpoint tracking, and evaluation.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{finite_diff_check, FdReport, ParamStore, Tape};
use crate::camera::{sphere_views, Camera};
use crate::grid::{synth_volume, Blend, Primitive, SceneRecipe};
use crate::dvr::{self, backward, render_trace, RenderConfig, RenderGrads, Scene, DEFAULT_ALPHA_STOP};
use crate::encoder::{ImageDecoder, TinyEncoder};
use crate::error::{read_json, write_json, Error, Result};
use crate::grid::{load_volume_file, Volume3D};
use crate::image::ImageF;
use crate::loss::{combined_loss, combined_loss_grad, mse, ssim, LossMode, SsimConfig};
use crate::math::{derive_seed, Vec3};
use crate::tf::{ramp_bins, Classifier, LookupTF, Mlp, MlpTF, TfKind, TransferFunction, DEFAULT_KAPPA_MAX};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_CAMERA_RADIUS: f64 = 2.5;
pub const DEFAULT_S_RENDER: f64 = 3.0;
pub const DEFAULT_S_EVAL: f64 = 3.0;

// Seed streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_JITTER: u64 = 3;

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// Bias-corrected Adam update from the store's gradients, followed by
/// projection of bounded blocks and zeroing of the gradients.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, lr: f64) {
    assert_eq!(state.m.len(), store.len(), "optimizer state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (values, grads) = store.values_and_grads_mut();
    for i in 0..values.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    store.project();
    store.zero_grads();
}

// ---------------------------------------------------------------------------
// Schedules and presets

/// `s_l (1 - (e/E)^2) + (e/E)^2 s_h`.
pub fn annealed_sampling_rate(e: usize, epochs: usize, s_l: f64, s_h: f64) -> f64 {
    let x = e as f64 / epochs as f64;
    let x2 = x * x;
    s_l * (1.0 - x2) + x2 * s_h
}

/// Images per step for a sampling rate: {12, 6, 3, 2, 1} at
/// s in {0.25, 0.5, 1, 2, 3}, rounding up to the next tier.
pub fn batch_preset(s: f64) -> usize {
    if s <= 0.25 {
        12
    } else if s <= 0.5 {
        6
    } else if s <= 1.0 {
        3
    } else if s <= 2.0 {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Sampling {
    Fixed { s: f64 },
    Annealed { s_l: f64, s_h: f64 },
}

impl Sampling {
    pub fn at(&self, e: usize, epochs: usize) -> f64 {
        match *self {
            Sampling::Fixed { s } => s,
            Sampling::Annealed { s_l, s_h } => annealed_sampling_rate(e, epochs, s_l, s_h),
        }
    }

    /// Rate that sizes the batch: the highest one the run reaches.
    pub fn peak(&self) -> f64 {
        match *self {
            Sampling::Fixed { s } => s,
            Sampling::Annealed { s_h, .. } => s_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampling::Fixed { s } if s > 0.0 && s.is_finite() => Ok(()),
            Sampling::Annealed { s_l, s_h } if s_l > 0.0 && s_l <= s_h && s_h.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid sampling {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Models

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lookup,
    MlpTf,
    Latent,
}

impl ModelKind {
    pub fn default_lr(self) -> f64 {
        match self {
            ModelKind::Lookup => 0.3,
            ModelKind::MlpTf => 0.05,
            ModelKind::Latent => 0.003,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lookup => "lookup",
            ModelKind::MlpTf => "mlp-tf",
            ModelKind::Latent => "latent",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookup" => Ok(ModelKind::Lookup),
            "mlp-tf" | "mlp" => Ok(ModelKind::MlpTf),
            "latent" => Ok(ModelKind::Latent),
            _ => Err(Error::Config(format!("unknown model {s:?}"))),
        }
    }
}

fn default_kappa_max() -> f64 {
    DEFAULT_KAPPA_MAX
}

fn default_hidden() -> Vec<usize> {
    vec![16, 16]
}

fn default_latent_features() -> usize {
    8
}

/// Architecture choice; enough to rebuild a model from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_kappa_max")]
    pub kappa_max: f64,
    /// Hidden widths of the 1D MLP transfer function.
    #[serde(default = "default_hidden")]
    pub mlp_hidden: Vec<usize>,
    /// Encoder output channels, which are also the latent color channels.
    #[serde(default = "default_latent_features")]
    pub latent_features: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            kappa_max: DEFAULT_KAPPA_MAX,
            mlp_hidden: default_hidden(),
            latent_features: default_latent_features(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Lookup(LookupTF),
    MlpTf(MlpTF),
    /// Learned encoder, κ from the features, features as latent colors,
    /// per-pixel decoder.
    Latent {
        encoder: TinyEncoder,
        kappa: MlpTF,
        decoder: Mlp,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub arch: Architecture,
}

/// Training image with its camera and jitter seed.
pub struct View<'a> {
    pub camera: Camera,
    pub target: &'a ImageF,
    pub seed: u64,
}

struct LossSetup<'a> {
    cfg: &'a RenderConfig,
    mode: LossMode,
    ssim: &'a SsimConfig,
}

fn view_loss_grad<C: Classifier>(
    scene: &Scene<'_, C>,
    view: &View<'_>,
    setup: &LossSetup<'_>,
    store_len: usize,
    with_features: bool,
) -> Result<(f64, Option<RenderGrads>)> {
    let trace = render_trace(scene, &view.camera, setup.cfg, view.seed)?;
    let mut d = vec![0.0; trace.rgb.data().len()];
    let loss = combined_loss_grad(&trace.rgb, view.target, setup.mode, setup.ssim, &mut d)?;
    if !loss.is_finite() {
        return Ok((loss, None));
    }
    let grads = backward(scene, setup.cfg, &trace, &d, store_len, with_features)?;
    Ok((loss, Some(grads)))
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = match spec.kind {
            ModelKind::Lookup => Architecture::Lookup(LookupTF::register(&mut store, "tf", &ramp_bins(), spec.kappa_max)?),
            ModelKind::MlpTf => {
                Architecture::MlpTf(MlpTF::register(&mut store, "tf", 1, &spec.mlp_hidden, 3, spec.kappa_max, &mut rng)?)
            }
            ModelKind::Latent => {
                let n = spec.latent_features;
                if n == 0 {
                    return Err(Error::Config("latent model needs at least one feature".into()));
                }
                let encoder = TinyEncoder::register(&mut store, "encoder", n, &mut rng)?;
                let kappa = MlpTF::register(&mut store, "kappa", n, &[16], 0, spec.kappa_max, &mut rng)?;
                let ImageDecoder::Mlp(decoder) = ImageDecoder::register_mlp(&mut store, "decoder", n, &mut rng)? else {
                    unreachable!("register_mlp builds an MLP decoder")
                };
                Architecture::Latent { encoder, kappa, decoder }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            store,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    fn check_volume(&self, vol: &Volume3D) -> Result<()> {
        if vol.channels() != 1 {
            return Err(Error::Config(format!("models take scalar volumes, got {} channels", vol.channels())));
        }
        Ok(())
    }

    /// Inference renders (RGBA) of several views; learned features are
    /// computed once for all of them.
    pub fn render_views(&self, vol: &Volume3D, cams: &[Camera], cfg: &RenderConfig, seed: u64) -> Result<Vec<ImageF>> {
        self.check_volume(vol)?;
        let store = &self.store;
        let each = |i: usize| derive_seed(seed, i as u64);
        match &self.arch {
            Architecture::Lookup(l) => {
                let p = l.prepare(store);
                let scene = Scene { features: vol, classifier: &p, decoder: None };
                cams.iter().enumerate().map(|(i, c)| dvr::render(&scene, c, cfg, each(i))).collect()
            }
            Architecture::MlpTf(m) => {
                let p = m.prepare(store);
                let scene = Scene { features: vol, classifier: &p, decoder: None };
                cams.iter().enumerate().map(|(i, c)| dvr::render(&scene, c, cfg, each(i))).collect()
            }
            Architecture::Latent { encoder, kappa, decoder } => {
                let fv = encoder.encode(store, vol)?;
                let p = kappa.prepare_latent(store);
                let d = decoder.prepare(store);
                let scene = Scene { features: &fv.volume, classifier: &p, decoder: Some(&d) };
                cams.iter().enumerate().map(|(i, c)| dvr::render(&scene, c, cfg, each(i))).collect()
            }
        }
    }

    pub fn render(&self, vol: &Volume3D, cam: &Camera, cfg: &RenderConfig, seed: u64) -> Result<ImageF> {
        Ok(self.render_views(vol, std::slice::from_ref(cam), cfg, seed)?.remove(0))
    }

    /// Summed training loss over `views` without gradients.
    pub fn loss(&self, vol: &Volume3D, views: &[View<'_>], cfg: &RenderConfig, mode: LossMode, ssim_cfg: &SsimConfig) -> Result<f64> {
        self.loss_with(&self.store, vol, views, cfg, mode, ssim_cfg)
    }

    /// [`Model::loss`] with parameter values taken from `store`, which must
    /// share this model's layout.
    fn loss_with(
        &self,
        store: &ParamStore,
        vol: &Volume3D,
        views: &[View<'_>],
        cfg: &RenderConfig,
        mode: LossMode,
        ssim_cfg: &SsimConfig,
    ) -> Result<f64> {
        self.check_volume(vol)?;
        fn sum<C: Classifier>(scene: &Scene<'_, C>, views: &[View<'_>], cfg: &RenderConfig, mode: LossMode, ssim_cfg: &SsimConfig) -> Result<f64> {
            let mut total = 0.0;
            for v in views {
                let trace = render_trace(scene, &v.camera, cfg, v.seed)?;
                total += combined_loss(&trace.rgb, v.target, mode, ssim_cfg)?;
            }
            Ok(total)
        }
        match &self.arch {
            Architecture::Lookup(l) => {
                let p = l.prepare(store);
                sum(&Scene { features: vol, classifier: &p, decoder: None }, views, cfg, mode, ssim_cfg)
            }
            Architecture::MlpTf(m) => {
                let p = m.prepare(store);
                sum(&Scene { features: vol, classifier: &p, decoder: None }, views, cfg, mode, ssim_cfg)
            }
            Architecture::Latent { encoder, kappa, decoder } => {
                let fv = encoder.encode(store, vol)?;
                let p = kappa.prepare_latent(store);
                let d = decoder.prepare(store);
                sum(&Scene { features: &fv.volume, classifier: &p, decoder: Some(&d) }, views, cfg, mode, ssim_cfg)
            }
        }
    }

    /// Sums the training loss over `views` and accumulates its gradient into
    /// the store. Returns the summed loss; a non-finite loss leaves the
    /// gradients untouched.
    pub fn loss_and_grad(
        &mut self,
        vol: &Volume3D,
        views: &[View<'_>],
        cfg: &RenderConfig,
        mode: LossMode,
        ssim_cfg: &SsimConfig,
    ) -> Result<f64> {
        self.check_volume(vol)?;
        let setup = LossSetup { cfg, mode, ssim: ssim_cfg };
        let n = self.store.len();
        let mut grad = vec![0.0; n];
        let mut total = 0.0;
        match &self.arch {
            Architecture::Lookup(l) => {
                let p = l.prepare(&self.store);
                let scene = Scene { features: vol, classifier: &p, decoder: None };
                for v in views {
                    let (loss, g) = view_loss_grad(&scene, v, &setup, n, false)?;
                    total += loss;
                    match g {
                        Some(g) => g.apply(&p, &mut grad),
                        None => return Ok(total),
                    }
                }
            }
            Architecture::MlpTf(m) => {
                let p = m.prepare(&self.store);
                let scene = Scene { features: vol, classifier: &p, decoder: None };
                for v in views {
                    let (loss, g) = view_loss_grad(&scene, v, &setup, n, false)?;
                    total += loss;
                    match g {
                        Some(g) => g.apply(&p, &mut grad),
                        None => return Ok(total),
                    }
                }
            }
            Architecture::Latent { encoder, kappa, decoder } => {
                let mut tape = Tape::new();
                let (node, fv) = encoder.record(&mut tape, &self.store, vol)?;
                let p = kappa.prepare_latent(&self.store);
                let d = decoder.prepare(&self.store);
                let scene = Scene { features: &fv.volume, classifier: &p, decoder: Some(&d) };
                let mut d_features = vec![0.0; fv.volume.data().len()];
                for v in views {
                    let (loss, g) = view_loss_grad(&scene, v, &setup, n, true)?;
                    total += loss;
                    let Some(g) = g else { return Ok(total) };
                    g.apply(&p, &mut grad);
                    for (a, b) in d_features.iter_mut().zip(&g.features) {
                        *a += b;
                    }
                }
                tape.backward_vec(node, &d_features, &mut grad)?;
            }
        }
        self.store.accumulate(&grad);
        Ok(total)
    }

    /// Per-block value ranges, for diagnosing failed runs.
    pub fn param_stats(&self) -> String {
        let mut parts = Vec::new();
        for b in self.store.blocks() {
            let vals = &self.store.values()[b.offset..b.offset + b.len];
            let grads = &self.store.grads()[b.offset..b.offset + b.len];
            let bad = vals.iter().chain(grads).filter(|v| !v.is_finite()).count();
            let finite = vals.iter().copied().filter(|v| v.is_finite());
            let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let mean = vals.iter().sum::<f64>() / b.len.max(1) as f64;
            parts.push(format!("{} [{lo:.4e}, {hi:.4e}] mean {mean:.4e}, {bad} non-finite", b.name));
        }
        parts.join("; ")
    }

    /// Ground-truth style model from a transfer-function file.
    pub fn from_transfer_function(tf: TransferFunction) -> Result<Self> {
        let (kind, arch, spec_hidden) = match tf.kind {
            TfKind::Lookup(l) => (ModelKind::Lookup, Architecture::Lookup(l), default_hidden()),
            TfKind::Mlp(m) => {
                if m.n_f != 1 || m.n_c != 3 {
                    return Err(Error::Tf(format!("MLP transfer function maps {} features to {} colors, expected 1 to 3", m.n_f, m.n_c)));
                }
                let hidden = m.mlp.layers[..m.mlp.layers.len() - 1].iter().map(|l| l.n_out).collect();
                (ModelKind::MlpTf, Architecture::MlpTf(m), hidden)
            }
        };
        let kappa_max = match &arch {
            Architecture::Lookup(l) => l.kappa_max,
            Architecture::MlpTf(m) => m.kappa_max,
            Architecture::Latent { .. } => unreachable!(),
        };
        Ok(Self {
            spec: ModelSpec {
                kind,
                kappa_max,
                mlp_hidden: spec_hidden,
                latent_features: default_latent_features(),
            },
            store: tf.store,
            arch,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFile {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub best: Option<BestRecord>,
    pub blocks: Vec<BlockFile>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: Option<&TrainConfig>, best: Option<BestRecord>) -> Self {
        let blocks = model
            .store
            .blocks()
            .iter()
            .map(|b| BlockFile {
                name: b.name.clone(),
                shape: b.shape.clone(),
                values: model.store.values()[b.offset..b.offset + b.len].to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            model: model.spec.clone(),
            config: config.cloned(),
            best,
            blocks,
        }
    }

    /// Rebuilds the model; every block must match the architecture exactly.
    pub fn to_model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = Model::new(&self.model, 0)?;
        if model.store.blocks().len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "{} model has {} parameter blocks, checkpoint has {}",
                self.model.kind,
                model.store.blocks().len(),
                self.blocks.len()
            )));
        }
        for f in &self.blocks {
            let id = model
                .store
                .find(&f.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected block {:?}", f.name)))?;
            if model.store.block(id).shape != f.shape || f.values.len() != model.store.get(id).len() {
                return Err(Error::Checkpoint(format!("block {:?} has shape {:?}", f.name, f.shape)));
            }
            model.store.get_mut(id).copy_from_slice(&f.values);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera: Camera,
    /// Float image, relative to the manifest directory.
    pub image: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Volume manifest of the network input.
    pub volume: PathBuf,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub s_render: f64,
    /// Ground-truth transfer function, relative to the manifest directory.
    #[serde(default)]
    pub gt_tf: Option<PathBuf>,
    pub views: Vec<ViewEntry>,
}

/// Inputs of [`make_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Volume the models will see.
    pub volume: PathBuf,
    /// Volume the targets are rendered from; the input volume when unset.
    pub render_volume: Option<PathBuf>,
    pub tf: PathBuf,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub s_render: f64,
    /// View counts per split in train, val, test order.
    pub splits: Vec<usize>,
    pub background: [f64; 3],
    pub seed: u64,
    pub radius: f64,
    pub out_dir: PathBuf,
}

impl DatasetSpec {
    pub fn new(volume: PathBuf, tf: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            volume,
            render_volume: None,
            tf,
            views: 32,
            width: 128,
            height: 128,
            s_render: DEFAULT_S_RENDER,
            splits: vec![25, 7],
            background: [0.0; 3],
            seed: 0,
            radius: DEFAULT_CAMERA_RADIUS,
            out_dir,
        }
    }
}

fn split_labels(splits: &[usize], n: usize) -> Result<Vec<Split>> {
    if splits.is_empty() || splits.len() > 3 || splits.iter().sum::<usize>() != n {
        return Err(Error::Config(format!("split {splits:?} does not partition {n} views")));
    }
    let kinds = [Split::Train, Split::Val, Split::Test];
    Ok(splits.iter().zip(kinds).flat_map(|(&k, s)| std::iter::repeat(s).take(k)).collect())
}

/// Renders ground-truth views with a transfer function and writes PFM and
/// PNG images plus the manifest. Returns the manifest path.
pub fn make_dataset(spec: &DatasetSpec) -> Result<(PathBuf, DatasetManifest)> {
    let labels = split_labels(&spec.splits, spec.views)?;
    let input = load_volume_file(&spec.volume)?;
    let source = match &spec.render_volume {
        Some(p) => load_volume_file(p)?,
        None => input.clone(),
    };
    if source.dims() != input.dims() {
        return Err(Error::Config("render volume and input volume differ in size".into()));
    }
    let tf = TransferFunction::load(&spec.tf)?;
    let gt = Model::from_transfer_function(tf.clone())?;
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let mut cfg = RenderConfig::new(spec.width, spec.height, spec.s_render);
    cfg.background = spec.background;
    let cams = sphere_views(spec.views, spec.radius, spec.seed);
    let images = gt.render_views(&source, &cams, &cfg, spec.seed)?;
    let mut views = Vec::with_capacity(spec.views);
    for (i, ((cam, img), split)) in cams.iter().zip(&images).zip(labels).enumerate() {
        let rgb = img.take_channels(3)?;
        let name = format!("view_{i:03}");
        rgb.save_pfm(&spec.out_dir.join(format!("{name}.pfm")))?;
        rgb.save_png(&spec.out_dir.join(format!("{name}.png")))?;
        views.push(ViewEntry {
            camera: *cam,
            image: PathBuf::from(format!("{name}.pfm")),
            split,
        });
    }
    tf.save(&spec.out_dir.join("gt_tf.json"))?;
    let volume = std::path::absolute(&spec.volume).map_err(|e| Error::io(&spec.volume, e))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        volume,
        background: spec.background,
        width: spec.width,
        height: spec.height,
        s_render: spec.s_render,
        gt_tf: Some(PathBuf::from("gt_tf.json")),
        views,
    };
    let path = spec.out_dir.join("dataset.json");
    write_json(&path, &manifest)?;
    Ok((path, manifest))
}

/// A loaded dataset: manifest, input volume and float target images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
    pub volume: Volume3D,
    pub images: Vec<ImageF>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(path)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Manifest(format!("unsupported dataset version {}", manifest.version)));
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let volume = load_volume_file(&dir.join(&manifest.volume))?;
        let mut images = Vec::with_capacity(manifest.views.len());
        for v in &manifest.views {
            let img = ImageF::load(&dir.join(&v.image))?;
            if img.width() != manifest.width || img.height() != manifest.height {
                return Err(Error::Manifest(format!(
                    "{} is {}x{}, dataset is {}x{}",
                    v.image.display(),
                    img.width(),
                    img.height(),
                    manifest.width,
                    manifest.height
                )));
            }
            images.push(if img.channels() == 3 { img } else { img.take_channels(3)? });
        }
        Ok(Self {
            manifest,
            dir,
            volume,
            images,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.views.len()).filter(|&i| self.manifest.views[i].split == split).collect()
    }

    pub fn camera(&self, i: usize) -> Camera {
        self.manifest.views[i].camera
    }

    pub fn render_config(&self, s: f64) -> RenderConfig {
        let mut cfg = RenderConfig::new(self.manifest.width, self.manifest.height, s);
        cfg.background = self.manifest.background;
        cfg
    }
}

// ---------------------------------------------------------------------------
// Training

fn default_epochs() -> usize {
    100
}

fn default_jitter() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Model preset when unset.
    #[serde(default)]
    pub lr: Option<f64>,
    /// Sampling-rate preset when unset.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub sampling: Sampling,
    #[serde(default = "default_jitter")]
    pub jitter: bool,
    #[serde(default)]
    pub loss: LossMode,
    #[serde(default)]
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Omits wall times from the metrics log so that reruns match byte for
    /// byte; they go to `timing.jsonl` instead.
    #[serde(default)]
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn new(kind: ModelKind, dataset: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            model: ModelSpec::new(kind),
            epochs: default_epochs(),
            lr: None,
            batch_size: None,
            sampling: Sampling::Fixed { s: 1.0 },
            jitter: true,
            loss: LossMode::default(),
            seed: 0,
            dataset,
            out_dir,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        if !(self.model.kappa_max > 0.0) {
            return Err(Error::Config("kappa_max must be positive".into()));
        }
        self.sampling.validate()
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(self.model.kind.default_lr())
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(batch_preset(self.sampling.peak()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ssim: f64,
    pub val_mse: f64,
    pub s: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best: BestRecord,
    /// Sum of epoch wall times, measured in every mode.
    pub total_wall_ms: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model: Model,
}

/// Mean SSIM and MSE of inference renders against targets.
fn score(model: &Model, ds: &Dataset, idx: &[usize], cfg: &RenderConfig) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    let cams: Vec<Camera> = idx.iter().map(|&i| ds.camera(i)).collect();
    let renders = model.render_views(&ds.volume, &cams, cfg, 0)?;
    let ssim_cfg = SsimConfig::default();
    let mut per_view = Vec::with_capacity(idx.len());
    for (img, &i) in renders.iter().zip(idx) {
        let rgb = img.take_channels(3)?;
        per_view.push((ssim(&rgb, &ds.images[i], &ssim_cfg)?, mse(&rgb, &ds.images[i])?));
    }
    let n = per_view.len() as f64;
    let mean_ssim = per_view.iter().map(|v| v.0).sum::<f64>() / n;
    let mean_mse = per_view.iter().map(|v| v.1).sum::<f64>() / n;
    Ok((mean_ssim, mean_mse, per_view))
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.dataset)?;
    train_on(cfg, &ds)
}

/// Runs the epoch loop on a loaded dataset. Writes `metrics.jsonl` and
/// `best.json` (and `timing.jsonl` in deterministic mode) to `cfg.out_dir`.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("training needs nonempty train and val splits".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let timing_path = cfg.out_dir.join("timing.jsonl");
    let ckpt_path = cfg.out_dir.join("best.json");
    let mut metrics = create(&metrics_path)?;
    let mut timing = if cfg.deterministic { Some(create(&timing_path)?) } else { None };

    let mut model = Model::new(&cfg.model, derive_seed(cfg.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(model.store.len());
    let lr = cfg.effective_lr();
    let batch = cfg.effective_batch_size();
    let ssim_cfg = SsimConfig::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestRecord> = None;
    let mut total_wall_ms = 0.0;

    for e in 0..cfg.epochs {
        let start = Instant::now();
        let s = cfg.sampling.at(e, cfg.epochs);
        let mut rcfg = ds.render_config(s);
        rcfg.jitter = cfg.jitter;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_SHUFFLE), e as u64)));
        let jitter_base = derive_seed(derive_seed(cfg.seed, STREAM_JITTER), e as u64);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let views: Vec<View<'_>> = chunk
                .iter()
                .map(|&i| View {
                    camera: ds.camera(i),
                    target: &ds.images[i],
                    seed: derive_seed(jitter_base, i as u64),
                })
                .collect();
            let loss = model.loss_and_grad(&ds.volume, &views, &rcfg, cfg.loss, &ssim_cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: e,
                    step,
                    diagnostic: model.param_stats(),
                });
            }
            adam_step(&mut adam, &mut model.store, lr);
            loss_sum += loss;
        }

        let val_cfg = ds.render_config(s);
        let (val_ssim, val_mse, _) = score(&model, ds, &val_idx, &val_cfg)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        total_wall_ms += wall_ms;
        if best.is_none_or(|b| val_ssim > b.val_ssim) {
            let record = BestRecord { epoch: e, val_ssim };
            best = Some(record);
            Checkpoint::from_model(&model, Some(cfg), best).save(&ckpt_path)?;
        }
        let m = EpochMetrics {
            epoch: e,
            train_loss: loss_sum / train_idx.len() as f64,
            val_ssim,
            val_mse,
            s,
            wall_ms: (!cfg.deterministic).then_some(wall_ms),
        };
        log::info!(
            "epoch {e}: s {s:.3}, loss {:.6}, val SSIM {val_ssim:.4}, {wall_ms:.0} ms",
            m.train_loss
        );
        write_line(&mut metrics, &metrics_path, &m)?;
        if let Some(t) = timing.as_mut() {
            write_line(t, &timing_path, &serde_json::json!({ "epoch": e, "wall_ms": wall_ms }))?;
        }
        history.push(m);
    }
    Ok(TrainReport {
        history,
        best: best.expect("at least one epoch"),
        total_wall_ms,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        model,
    })
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Randomized tiny scene: 8^3 phantom, 4x4 random target, `s = 1`, no jitter.
#[derive(Debug, Clone)]
pub struct CheckScene {
    pub volume: Volume3D,
    pub camera: Camera,
    pub target: ImageF,
    pub cfg: RenderConfig,
}

pub const CHECK_SSIM_WINDOW: usize = 3;

pub fn check_scene(seed: u64) -> Result<CheckScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::new();
    for k in 0..3 {
        let center = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let intensity = rng.gen_range(0.2..0.9);
        let blend = if k == 0 { Blend::Replace } else { Blend::Add };
        primitives.push(if rng.gen_bool(0.5) {
            Primitive::Sphere { center, radius: rng.gen_range(0.15..0.35), intensity, blend }
        } else {
            let h = rng.gen_range(0.1..0.3);
            Primitive::Box { center, half_size: [h, rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)], intensity, blend }
        });
    }
    let volume = synth_volume(&SceneRecipe { primitives }, [8; 3], [1.0; 3])?;
    let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.3..1.0)).normalized();
    let camera = Camera::look_at(dir * 2.0, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0));
    let target = ImageF::new(4, 4, 3, (0..48).map(|_| rng.gen()).collect())?;
    let mut cfg = RenderConfig::new(4, 4, 1.0);
    cfg.background = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    Ok(CheckScene { volume, camera, target, cfg })
}

/// Model with seeded random parameters; lookup bins are drawn away from the
/// color bounds so that projection never binds.
pub fn random_model(kind: ModelKind, seed: u64) -> Result<Model> {
    let mut model = Model::new(&ModelSpec::new(kind), seed)?;
    if let Architecture::Lookup(l) = &model.arch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT));
        let colors = l.colors;
        let kappa = l.kappa;
        for v in model.store.get_mut(colors) {
            *v = rng.gen_range(0.1..0.9);
        }
        for v in model.store.get_mut(kappa) {
            *v = rng.gen_range(-3.0..0.0);
        }
    }
    Ok(model)
}

/// Compares the analytic gradient of the combined loss on [`check_scene`]
/// with central differences.
pub fn gradient_check(kind: ModelKind, seed: u64, eps: f64) -> Result<FdReport> {
    let scene = check_scene(seed)?;
    let mut model = random_model(kind, seed)?;
    let ssim_cfg = SsimConfig::with_window(CHECK_SSIM_WINDOW);
    let views = [View { camera: scene.camera, target: &scene.target, seed: 0 }];
    let mode = LossMode::MseSsim;
    model.store.zero_grads();
    model.loss_and_grad(&scene.volume, &views, &scene.cfg, mode, &ssim_cfg)?;
    let analytic = model.store.grads().to_vec();
    let mut failure = None;
    let probe = model.clone();
    let report = finite_diff_check(&mut model.store, eps, |store, grad| {
        if let Some(g) = grad {
            for (a, b) in g.iter_mut().zip(&analytic) {
                *a += b;
            }
            return 0.0;
        }
        match probe.loss_with(store, &scene.volume, &views, &scene.cfg, mode, &ssim_cfg) {
            Ok(l) => l,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub index: usize,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub s: f64,
    pub views: Vec<ViewScore>,
    pub mean_ssim: f64,
    pub mean_mse: f64,
}

/// Renders every view of a split at `s_eval` without jitter and scores it.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, s_eval: f64) -> Result<EvalReport> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("dataset has no {split} views")));
    }
    let mut cfg = ds.render_config(s_eval);
    cfg.alpha_stop = DEFAULT_ALPHA_STOP;
    cfg.validate()?;
    let (mean_ssim, mean_mse, per_view) = score(model, ds, &idx, &cfg)?;
    Ok(EvalReport {
        split,
        s: s_eval,
        views: idx
            .iter()
            .zip(per_view)
            .map(|(&index, (ssim, mse))| ViewScore { index, ssim, mse })
            .collect(),
        mean_ssim,
        mean_mse,
    })
}
