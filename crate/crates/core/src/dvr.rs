//! The ray marcher: jittered equidistant sampling, classification, emission
//! and absorption, front-to-back compositing in an `n_c`-channel color space,
//! whole-image rendering, and the reverse pass for training.
//!
//! Training renders in two passes. The forward pass produces the image and
//! keeps each ray's jitter offset; once the loss gradient per pixel is known,
//! every ray is marched again with its [`RaySampleRecord`] retained and the
//! compositing adjoint is run back to front over the record. Rows are split
//! into a fixed number of chunks whose gradient buffers are summed in chunk
//! order, so the result does not depend on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, jitter_offset, Camera, Ray};
use crate::error::{Error, Result};
use crate::grid::{Stencil, Volume3D};
use crate::image::ImageF;
use crate::math::{derive_seed, Vec3};
use crate::tf::{Classifier, PreparedMlp};

pub const DEFAULT_ALPHA_STOP: f64 = 0.99;
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Samples per voxel length.
    pub s: f64,
    pub jitter: bool,
    /// Upper bound of the jitter offset; the step length when unset.
    #[serde(default)]
    pub t_jmax: Option<f64>,
    /// Early-termination threshold, applied to inference renders only.
    pub alpha_stop: f64,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl RenderConfig {
    pub fn new(width: usize, height: usize, s: f64) -> Self {
        Self {
            s,
            jitter: false,
            t_jmax: None,
            alpha_stop: DEFAULT_ALPHA_STOP,
            background: [0.0; 3],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("sampling rate {} must be positive", self.s)));
        }
        if !(self.alpha_stop > 0.0 && self.alpha_stop <= 1.0) {
            return Err(Error::Config(format!("alpha_stop {} outside (0, 1]", self.alpha_stop)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("image size {}x{}", self.width, self.height)));
        }
        if let Some(t) = self.t_jmax {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("t_jmax {t} must be nonnegative")));
            }
        }
        Ok(())
    }

    /// Step length for a volume.
    pub fn step(&self, vol: &Volume3D) -> f64 {
        vol.min_voxel_size() / self.s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Early termination at `alpha_stop`.
    Inference,
    /// Full rays, no termination.
    Training,
}

#[inline]
pub fn opacity_from_kappa(kappa: f64, dt: f64) -> f64 {
    -(-kappa * dt).exp_m1()
}

/// One compositing step: `C' += (1 - A') C_i`, `A' += (1 - A') A_i`.
#[inline]
pub fn composite_step(acc_color: &mut [f64], acc_alpha: &mut f64, color: &[f64], alpha: f64) {
    let t = 1.0 - *acc_alpha;
    for (a, c) in acc_color.iter_mut().zip(color) {
        *a += t * c;
    }
    *acc_alpha += t * alpha;
}

/// Composites `(C_i, A_i)` samples front to back starting from zero.
pub fn composite_front_to_back(samples: &[(Vec<f64>, f64)], n_c: usize) -> (Vec<f64>, f64) {
    let mut color = vec![0.0; n_c];
    let mut alpha = 0.0;
    for (c, a) in samples {
        composite_step(&mut color, &mut alpha, c, *a);
    }
    (color, alpha)
}

/// Number of samples at `t_near + t_o + i dt` that do not pass `t_far`.
pub fn sample_count(ray: &Ray, t_o: f64, dt: f64) -> usize {
    if !ray.hits() {
        return 0;
    }
    let span = ray.t_far - ray.t_near - t_o;
    if span < 0.0 {
        return 0;
    }
    // The epsilon keeps exact multiples of dt from losing their last sample.
    (span / dt + 1e-9).floor() as usize + 1
}

/// Everything the compositing adjoint needs about one ray.
#[derive(Debug, Clone, Default)]
pub struct RaySampleRecord {
    pub positions: Vec<Vec3>,
    pub stencils: Vec<Stencil>,
    /// `n_f` per sample.
    pub features: Vec<f64>,
    /// Classified color per sample (`n_c`), before the step-length factor.
    pub colors: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Transmittance `1 - A'` in front of each sample.
    pub transmittance: Vec<f64>,
    /// Classifier scratch per sample.
    pub caches: Vec<f64>,
}

impl RaySampleRecord {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    fn clear(&mut self) {
        self.positions.clear();
        self.stencils.clear();
        self.features.clear();
        self.colors.clear();
        self.alphas.clear();
        self.transmittance.clear();
        self.caches.clear();
    }
}

/// Feature volume, classifier and optional decoder of one render.
pub struct Scene<'a, C: Classifier> {
    pub features: &'a Volume3D,
    pub classifier: &'a C,
    pub decoder: Option<&'a PreparedMlp<'a>>,
}

impl<C: Classifier> Scene<'_, C> {
    pub fn validate(&self) -> Result<()> {
        let (n_f, n_c) = (self.classifier.n_features(), self.classifier.n_colors());
        if self.features.channels() != n_f {
            return Err(Error::Config(format!(
                "classifier takes {n_f} features, volume has {} channels",
                self.features.channels()
            )));
        }
        match self.decoder {
            None if n_c != 3 => Err(Error::Config(format!("{n_c} color channels need a decoder"))),
            Some(d) if d.n_out() != 3 => Err(Error::Config("decoder must output RGB".into())),
            _ => Ok(()),
        }
    }

    fn n_c(&self) -> usize {
        self.classifier.n_colors()
    }
}

/// Per-worker buffers for one ray.
struct Workspace {
    feature: Vec<f64>,
    color: Vec<f64>,
    cache: Vec<f64>,
    d_color: Vec<f64>,
    d_feature: Vec<f64>,
    behind: Vec<f64>,
    record: RaySampleRecord,
    dec_cache: Vec<f64>,
}

impl Workspace {
    fn new<C: Classifier>(scene: &Scene<'_, C>) -> Self {
        let (n_f, n_c) = (scene.classifier.n_features(), scene.n_c());
        Self {
            feature: vec![0.0; n_f],
            color: vec![0.0; n_c],
            cache: vec![0.0; scene.classifier.cache_len()],
            d_color: vec![0.0; n_c],
            d_feature: vec![0.0; n_f],
            behind: vec![0.0; n_c],
            record: RaySampleRecord::default(),
            dec_cache: vec![0.0; scene.decoder.map_or(0, |d| d.cache_len())],
        }
    }
}

/// Marches one ray, writing `C'` into `acc` and returning `A'`. With `record`
/// set, every sample is retained for the reverse pass.
fn march<C: Classifier>(
    scene: &Scene<'_, C>,
    ray: &Ray,
    t_o: f64,
    dt: f64,
    alpha_stop: Option<f64>,
    ws: &mut Workspace,
    acc: &mut [f64],
    record: bool,
) -> f64 {
    acc.fill(0.0);
    let mut alpha = 0.0;
    if record {
        ws.record.clear();
    }
    let n = sample_count(ray, t_o, dt);
    let cl = scene.classifier;
    for i in 0..n {
        let p = ray.at(ray.t_near + t_o + i as f64 * dt);
        let st = scene.features.stencil(p);
        scene.features.gather(&st, &mut ws.feature);
        let kappa = cl.classify(&ws.feature, &mut ws.color, &mut ws.cache);
        let a = opacity_from_kappa(kappa, dt);
        let t = 1.0 - alpha;
        if record {
            let r = &mut ws.record;
            r.positions.push(p);
            r.stencils.push(st);
            r.features.extend_from_slice(&ws.feature);
            r.colors.extend_from_slice(&ws.color);
            r.alphas.push(a);
            r.transmittance.push(t);
            r.caches.extend_from_slice(&ws.cache);
        }
        for (o, c) in acc.iter_mut().zip(&ws.color) {
            *o += t * (c * dt);
        }
        alpha += t * a;
        if let Some(stop) = alpha_stop {
            if alpha >= stop {
                break;
            }
        }
    }
    alpha
}

/// Composites one ray in the given mode and returns `(C', A')`.
pub fn raymarch<C: Classifier>(
    scene: &Scene<'_, C>,
    ray: &Ray,
    t_o: f64,
    cfg: &RenderConfig,
    mode: Mode,
) -> Result<(Vec<f64>, f64)> {
    scene.validate()?;
    let mut ws = Workspace::new(scene);
    let mut acc = vec![0.0; scene.n_c()];
    let stop = (mode == Mode::Inference).then_some(cfg.alpha_stop);
    let a = march(scene, ray, t_o, cfg.step(scene.features), stop, &mut ws, &mut acc, false);
    Ok((acc, a))
}

/// Training-mode march that also returns the sample record.
pub fn raymarch_record<C: Classifier>(
    scene: &Scene<'_, C>,
    ray: &Ray,
    t_o: f64,
    cfg: &RenderConfig,
) -> Result<(Vec<f64>, f64, RaySampleRecord)> {
    scene.validate()?;
    let mut ws = Workspace::new(scene);
    let mut acc = vec![0.0; scene.n_c()];
    let a = march(scene, ray, t_o, cfg.step(scene.features), None, &mut ws, &mut acc, true);
    Ok((acc, a, ws.record))
}

/// Final RGB of a pixel from its composited latent color and opacity.
fn shade_pixel(decoder: Option<&PreparedMlp<'_>>, latent: &[f64], alpha: f64, bg: &[f64; 3], dec_cache: &mut [f64], out: &mut [f64]) {
    match decoder {
        None => {
            for k in 0..3 {
                out[k] = (latent[k] + (1.0 - alpha) * bg[k]).clamp(0.0, 1.0);
            }
        }
        Some(d) => {
            d.forward(latent, dec_cache);
            let rgb = &dec_cache[dec_cache.len() - 3..];
            for k in 0..3 {
                out[k] = (alpha * rgb[k] + (1.0 - alpha) * bg[k]).clamp(0.0, 1.0);
            }
        }
    }
}

/// Jitter offsets for one row, from a stream seeded by `(seed, row)`.
fn row_offsets(cfg: &RenderConfig, dt: f64, seed: u64, row: usize, out: &mut [f64]) {
    if !cfg.jitter {
        out.fill(0.0);
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, row as u64));
    let t_jmax = cfg.t_jmax.unwrap_or(dt);
    for o in out.iter_mut() {
        *o = jitter_offset(&mut rng, t_jmax);
    }
}

/// Forward state of a training render, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct RenderTrace {
    /// Background-composited RGB.
    pub rgb: ImageF,
    /// Composited `n_c` colors per pixel.
    pub latent: Vec<f64>,
    pub alpha: Vec<f64>,
    pub offsets: Vec<f64>,
    pub rays: Vec<Ray>,
    pub n_c: usize,
}

fn render_rows<C: Classifier>(
    scene: &Scene<'_, C>,
    rays: &[Ray],
    cfg: &RenderConfig,
    jitter_seed: u64,
    mode: Mode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h, n_c) = (cfg.width, cfg.height, scene.n_c());
    let dt = cfg.step(scene.features);
    let stop = (mode == Mode::Inference).then_some(cfg.alpha_stop);
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut ws = Workspace::new(scene);
            let mut offsets = vec![0.0; w];
            row_offsets(cfg, dt, jitter_seed, y, &mut offsets);
            let mut latent = vec![0.0; w * n_c];
            let mut alpha = vec![0.0; w];
            let mut rgb = vec![0.0; w * 3];
            for x in 0..w {
                let acc = &mut latent[x * n_c..(x + 1) * n_c];
                let a = march(scene, &rays[y * w + x], offsets[x], dt, stop, &mut ws, acc, false);
                alpha[x] = a;
                let dec_cache = &mut ws.dec_cache;
                shade_pixel(scene.decoder, acc, a, &cfg.background, dec_cache, &mut rgb[x * 3..x * 3 + 3]);
            }
            (rgb, latent, alpha, offsets)
        })
        .collect();
    let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (rgb, latent, alpha, offsets) in rows {
        out.0.extend(rgb);
        out.1.extend(latent);
        out.2.extend(alpha);
        out.3.extend(offsets);
    }
    out
}

fn prepare_rays<C: Classifier>(scene: &Scene<'_, C>, cam: &Camera, cfg: &RenderConfig) -> Result<Vec<Ray>> {
    cfg.validate()?;
    scene.validate()?;
    generate_rays(cam, cfg.width, cfg.height, &scene.features.bbox())
}

/// Inference render: RGBA with background-composited color and alpha `A'`.
pub fn render<C: Classifier>(scene: &Scene<'_, C>, cam: &Camera, cfg: &RenderConfig, jitter_seed: u64) -> Result<ImageF> {
    let rays = prepare_rays(scene, cam, cfg)?;
    let (rgb, _, alpha, _) = render_rows(scene, &rays, cfg, jitter_seed, Mode::Inference);
    let data = rgb
        .chunks_exact(3)
        .zip(&alpha)
        .flat_map(|(c, &a)| [c[0], c[1], c[2], a])
        .collect();
    ImageF::new(cfg.width, cfg.height, 4, data)
}

/// Training forward pass without early termination.
pub fn render_trace<C: Classifier>(
    scene: &Scene<'_, C>,
    cam: &Camera,
    cfg: &RenderConfig,
    jitter_seed: u64,
) -> Result<RenderTrace> {
    let rays = prepare_rays(scene, cam, cfg)?;
    let (rgb, latent, alpha, offsets) = render_rows(scene, &rays, cfg, jitter_seed, Mode::Training);
    Ok(RenderTrace {
        rgb: ImageF::new(cfg.width, cfg.height, 3, rgb)?,
        latent,
        alpha,
        offsets,
        rays,
        n_c: scene.n_c(),
    })
}

/// Gradients produced by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    /// Classifier-local layout; see [`Classifier::finish_grad`].
    pub classifier: Vec<f64>,
    /// Parameter-store layout; empty without a decoder.
    pub decoder: Vec<f64>,
    /// Feature-volume layout; empty unless requested.
    pub features: Vec<f64>,
}

impl RenderGrads {
    fn zeros<C: Classifier>(scene: &Scene<'_, C>, store_len: usize, with_features: bool) -> Self {
        Self {
            classifier: vec![0.0; scene.classifier.grad_len()],
            decoder: if scene.decoder.is_some() { vec![0.0; store_len] } else { Vec::new() },
            features: if with_features { vec![0.0; scene.features.data().len()] } else { Vec::new() },
        }
    }

    fn add(&mut self, o: &RenderGrads) {
        for (a, b) in [
            (&mut self.classifier, &o.classifier),
            (&mut self.decoder, &o.decoder),
            (&mut self.features, &o.features),
        ] {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    /// Adds classifier and decoder gradients into store-layout `param_grads`.
    pub fn apply<C: Classifier>(&self, classifier: &C, param_grads: &mut [f64]) {
        classifier.finish_grad(&self.classifier, param_grads);
        for (g, d) in param_grads.iter_mut().zip(&self.decoder) {
            *g += d;
        }
    }
}

/// Reverse pass of [`render_trace`] given `d_rgb = dL/d(rgb)`.
///
/// `store_len` sizes the decoder gradient buffer; `with_features` requests
/// gradients w.r.t. the feature volume.
pub fn backward<C: Classifier>(
    scene: &Scene<'_, C>,
    cfg: &RenderConfig,
    trace: &RenderTrace,
    d_rgb: &[f64],
    store_len: usize,
    with_features: bool,
) -> Result<RenderGrads> {
    scene.validate()?;
    let (w, h, n_c) = (cfg.width, cfg.height, scene.n_c());
    if d_rgb.len() != w * h * 3 || trace.rays.len() != w * h || trace.n_c != n_c {
        return Err(Error::Shape("render gradient does not match the trace".into()));
    }
    let dt = cfg.step(scene.features);
    let rows_per_chunk = h.div_ceil(GRAD_CHUNKS);
    let parts: Vec<RenderGrads> = (0..h.div_ceil(rows_per_chunk))
        .into_par_iter()
        .map(|chunk| {
            let mut grads = RenderGrads::zeros(scene, store_len, with_features);
            let mut ws = Workspace::new(scene);
            let mut acc = vec![0.0; n_c];
            let mut g_c = vec![0.0; n_c];
            let rows = chunk * rows_per_chunk..((chunk + 1) * rows_per_chunk).min(h);
            for y in rows {
                for x in 0..w {
                    let px = y * w + x;
                    let latent = &trace.latent[px * n_c..(px + 1) * n_c];
                    let alpha = trace.alpha[px];
                    let g_a = pixel_adjoint(scene, cfg, latent, alpha, &d_rgb[px * 3..px * 3 + 3], &mut ws, &mut g_c, &mut grads.decoder);
                    if g_a == 0.0 && g_c.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    march(scene, &trace.rays[px], trace.offsets[px], dt, None, &mut ws, &mut acc, true);
                    ray_adjoint(scene, dt, &g_c, g_a, &mut ws, &mut grads);
                }
            }
            grads
        })
        .collect();
    let mut total = RenderGrads::zeros(scene, store_len, with_features);
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

/// Chains `dL/d(rgb)` of one pixel to `dL/dC'` (into `g_c`) and returns `dL/dA'`.
#[allow(clippy::too_many_arguments)]
fn pixel_adjoint<C: Classifier>(
    scene: &Scene<'_, C>,
    cfg: &RenderConfig,
    latent: &[f64],
    alpha: f64,
    d_rgb: &[f64],
    ws: &mut Workspace,
    g_c: &mut [f64],
    decoder_grad: &mut [f64],
) -> f64 {
    let bg = &cfg.background;
    g_c.fill(0.0);
    match scene.decoder {
        None => {
            let mut g_a = 0.0;
            for k in 0..3 {
                let raw = latent[k] + (1.0 - alpha) * bg[k];
                if (0.0..=1.0).contains(&raw) {
                    g_c[k] = d_rgb[k];
                    g_a -= d_rgb[k] * bg[k];
                }
            }
            g_a
        }
        Some(d) => {
            d.forward(latent, &mut ws.dec_cache);
            let n = ws.dec_cache.len();
            let mut d_out = [0.0; 3];
            let mut g_a = 0.0;
            for k in 0..3 {
                let rgb = ws.dec_cache[n - 3 + k];
                d_out[k] = alpha * d_rgb[k];
                g_a += d_rgb[k] * (rgb - bg[k]);
            }
            d.backward(latent, &ws.dec_cache, &d_out, decoder_grad, Some(g_c));
            g_a
        }
    }
}

/// Back-to-front adjoint over the recorded samples of one ray.
///
/// With `S_i` the color composited behind sample `i` as seen from `i + 1`
/// and `R_i` the transmittance behind it, `dC'/dA_i = -T_i S_i` and
/// `dA'/dA_i = T_i R_i`.
fn ray_adjoint<C: Classifier>(scene: &Scene<'_, C>, dt: f64, g_c: &[f64], g_a: f64, ws: &mut Workspace, grads: &mut RenderGrads) {
    let n_c = g_c.len();
    let n_f = ws.feature.len();
    let cache_len = ws.cache.len();
    let with_features = !grads.features.is_empty();
    ws.behind.fill(0.0);
    let mut r = 1.0;
    let rec = &ws.record;
    for i in (0..rec.len()).rev() {
        let (t, a) = (rec.transmittance[i], rec.alphas[i]);
        let color = &rec.colors[i * n_c..(i + 1) * n_c];
        let dot: f64 = g_c.iter().zip(&ws.behind).map(|(g, s)| g * s).sum();
        let d_alpha = -t * dot + g_a * t * r;
        let d_kappa = d_alpha * dt * (1.0 - a);
        for k in 0..n_c {
            ws.d_color[k] = t * dt * g_c[k];
        }
        let feature = &rec.features[i * n_f..(i + 1) * n_f];
        let cache = &rec.caches[i * cache_len..(i + 1) * cache_len];
        if with_features {
            ws.d_feature.fill(0.0);
            scene.classifier.classify_backward(
                feature,
                color,
                cache,
                &ws.d_color,
                d_kappa,
                &mut grads.classifier,
                Some(&mut ws.d_feature),
            );
            scene.features.scatter(&rec.stencils[i], &ws.d_feature, &mut grads.features);
        } else {
            scene
                .classifier
                .classify_backward(feature, color, cache, &ws.d_color, d_kappa, &mut grads.classifier, None);
        }
        for k in 0..n_c {
            ws.behind[k] = color[k] * dt + (1.0 - a) * ws.behind[k];
        }
        r *= 1.0 - a;
    }
}
