//! Transfer functions: feature vectors to emission color and absorption κ.
//!
//! Two parametrizations are provided, a 256-bin lookup table over normalized
//! intensity and a small MLP. Both register their trainable scalars in a
//! [`ParamStore`] and expose a [`Classifier`] view used by the ray marcher.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{kernels, NodeId, ParamId, ParamStore, Tape};
use crate::error::{read_json, write_json, Error, Result};
use crate::math::{logit, sigmoid};

pub const LOOKUP_BINS: usize = 256;
pub const DEFAULT_KAPPA_MAX: f64 = 64.0;
/// Initial absorption as a fraction of `kappa_max`.
pub const INITIAL_KAPPA_FRACTION: f64 = 0.05;
const MAX_WIDTH: usize = 64;
const TF_FILE_VERSION: u32 = 1;

/// Per-sample classification with an explicit adjoint.
///
/// `cache` is scratch written by [`Classifier::classify`] and read back by
/// [`Classifier::classify_backward`]. Gradients go into a classifier-local
/// buffer of length [`Classifier::grad_len`], which [`Classifier::finish_grad`]
/// maps onto the parameter store layout once per reduction.
pub trait Classifier: Sync {
    fn n_features(&self) -> usize;
    fn n_colors(&self) -> usize;
    fn cache_len(&self) -> usize;
    fn grad_len(&self) -> usize;

    /// Writes the emission color and returns κ.
    fn classify(&self, feature: &[f64], color: &mut [f64], cache: &mut [f64]) -> f64;

    #[allow(clippy::too_many_arguments)]
    fn classify_backward(
        &self,
        feature: &[f64],
        color: &[f64],
        cache: &[f64],
        d_color: &[f64],
        d_kappa: f64,
        grad: &mut [f64],
        d_feature: Option<&mut [f64]>,
    );

    fn finish_grad(&self, local: &[f64], param_grads: &mut [f64]);
}

// ---------------------------------------------------------------------------
// Lookup table

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookupTF {
    /// `[256][r, g, b]`, projected into `[0, 1]` after each optimizer step.
    pub colors: ParamId,
    /// `[256]` raw absorption, mapped through `kappa_max * sigmoid`.
    pub kappa: ParamId,
    pub kappa_max: f64,
}

/// Grayscale ramp with κ at 5% of `kappa_max`.
pub fn ramp_bins() -> Vec<[f64; 4]> {
    let k = logit(INITIAL_KAPPA_FRACTION);
    (0..LOOKUP_BINS)
        .map(|i| {
            let g = i as f64 / (LOOKUP_BINS - 1) as f64;
            [g, g, g, k]
        })
        .collect()
}

/// Raw bins with κ driven to exactly zero and no emission.
pub fn transparent_bins() -> Vec<[f64; 4]> {
    vec![[0.0, 0.0, 0.0, -1.0e4]; LOOKUP_BINS]
}

/// A peak of a hand-designed table: Gaussian κ bump around `center` in
/// intensity, colored `color`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TfPeak {
    pub center: f64,
    pub width: f64,
    pub color: [f64; 3],
    pub kappa: f64,
}

/// Raw bins from peaks. κ is the sum of the bumps. Each bin takes the color
/// of the peak contributing the most absorption there, faded by that peak's
/// falloff: emission does not vanish with κ, so empty space must be black.
pub fn peak_bins(peaks: &[TfPeak], kappa_max: f64) -> Vec<[f64; 4]> {
    (0..LOOKUP_BINS)
        .map(|i| {
            let x = i as f64 / (LOOKUP_BINS - 1) as f64;
            let falloff: Vec<f64> = peaks.iter().map(|p| (-0.5 * ((x - p.center) / p.width).powi(2)).exp()).collect();
            let kappa: f64 = falloff.iter().zip(peaks).map(|(f, p)| f * p.kappa).sum();
            let color = falloff
                .iter()
                .zip(peaks)
                .max_by(|a, b| (a.0 * a.1.kappa).total_cmp(&(b.0 * b.1.kappa)))
                .map_or([0.0; 3], |(f, p)| p.color.map(|c| c * f));
            [color[0], color[1], color[2], kappa_to_raw(kappa, kappa_max)]
        })
        .collect()
}

/// Ground-truth table for the three-shell phantom: translucent orange outer
/// shell, green middle shell, dense pale core.
pub fn shells_bins() -> Vec<[f64; 4]> {
    let peak = |center, color, kappa| TfPeak { center, width: 0.04, color, kappa };
    peak_bins(
        &[
            peak(0.3, [1.0, 0.55, 0.1], 3.0),
            peak(0.6, [0.2, 0.85, 0.3], 8.0),
            peak(0.9, [0.9, 0.9, 1.0], 30.0),
        ],
        DEFAULT_KAPPA_MAX,
    )
}

/// Table for the labeled twin phantom: a dense dark-red ball at 0.3 and a
/// faint glowing blue shell at 0.8. Over a dark-gray background one reads as
/// a silhouette and the other as a glow, so no single color fits both.
pub fn twins_bins() -> Vec<[f64; 4]> {
    let peak = |center, color, kappa| TfPeak { center, width: 0.05, color, kappa };
    peak_bins(&[peak(0.3, [0.8, 0.1, 0.05], 20.0), peak(0.8, [0.4, 0.7, 1.0], 1.0)], DEFAULT_KAPPA_MAX)
}

/// Built-in tables by name: `shells`, `twins`, `ramp`.
pub fn preset_bins(name: &str) -> Option<Vec<[f64; 4]>> {
    match name {
        "shells" | "three-shells" => Some(shells_bins()),
        "twins" | "twins-labels" => Some(twins_bins()),
        "ramp" => Some(ramp_bins()),
        _ => None,
    }
}

/// Raw κ parameter giving absorption `kappa` under `kappa_max`.
pub fn kappa_to_raw(kappa: f64, kappa_max: f64) -> f64 {
    logit((kappa / kappa_max).clamp(1e-12, 1.0 - 1e-12))
}

impl LookupTF {
    /// Registers raw bins `[r, g, b, kappa_raw]`.
    pub fn register(store: &mut ParamStore, name: &str, bins: &[[f64; 4]], kappa_max: f64) -> Result<Self> {
        if bins.len() != LOOKUP_BINS {
            return Err(Error::Tf(format!("lookup needs {LOOKUP_BINS} bins, got {}", bins.len())));
        }
        let colors = bins.iter().flat_map(|b| [b[0], b[1], b[2]]).collect();
        let kappa = bins.iter().map(|b| b[3]).collect();
        Ok(Self {
            colors: store.add_bounded(&format!("{name}.colors"), &[LOOKUP_BINS, 3], colors, 0.0, 1.0)?,
            kappa: store.add(&format!("{name}.kappa"), &[LOOKUP_BINS], kappa)?,
            kappa_max,
        })
    }

    pub fn raw_bins(&self, store: &ParamStore) -> Vec<[f64; 4]> {
        store
            .get(self.colors)
            .chunks_exact(3)
            .zip(store.get(self.kappa))
            .map(|(c, &k)| [c[0], c[1], c[2], k])
            .collect()
    }

    /// Mapped table: clamped color and `kappa_max * sigmoid(raw)`.
    pub fn mapped_bins(&self, store: &ParamStore) -> Vec<[f64; 4]> {
        self.raw_bins(store)
            .into_iter()
            .map(|b| {
                [
                    b[0].clamp(0.0, 1.0),
                    b[1].clamp(0.0, 1.0),
                    b[2].clamp(0.0, 1.0),
                    self.kappa_max * sigmoid(b[3]),
                ]
            })
            .collect()
    }

    /// Color and κ for a normalized intensity.
    pub fn eval(&self, store: &ParamStore, intensity: f64) -> ([f64; 3], f64) {
        let p = self.prepare(store);
        let mut c = [0.0; 3];
        let k = p.classify(&[intensity], &mut c, &mut []);
        (c, k)
    }

    pub fn prepare(&self, store: &ParamStore) -> PreparedLookup {
        PreparedLookup {
            mapped: self.mapped_bins(store),
            raw: self.raw_bins(store),
            color_offset: store.range(self.colors).start,
            kappa_offset: store.range(self.kappa).start,
            kappa_max: self.kappa_max,
        }
    }

    /// Writes 256 rows of `r,g,b,kappa` in mapped units.
    pub fn export_csv(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(LOOKUP_BINS * 48);
        for b in self.mapped_bins(store) {
            out.push_str(&format!("{},{},{},{}\n", b[0], b[1], b[2], b[3]));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct PreparedLookup {
    mapped: Vec<[f64; 4]>,
    raw: Vec<[f64; 4]>,
    color_offset: usize,
    kappa_offset: usize,
    kappa_max: f64,
}

impl PreparedLookup {
    #[inline]
    fn locate(intensity: f64) -> (usize, f64) {
        let u = intensity.clamp(0.0, 1.0) * (LOOKUP_BINS - 1) as f64;
        let i0 = (u as usize).min(LOOKUP_BINS - 2);
        (i0, u - i0 as f64)
    }
}

impl Classifier for PreparedLookup {
    fn n_features(&self) -> usize {
        1
    }

    fn n_colors(&self) -> usize {
        3
    }

    fn cache_len(&self) -> usize {
        0
    }

    fn grad_len(&self) -> usize {
        LOOKUP_BINS * 4
    }

    #[inline]
    fn classify(&self, feature: &[f64], color: &mut [f64], _cache: &mut [f64]) -> f64 {
        let (i0, f) = Self::locate(feature[0]);
        let (a, b) = (&self.mapped[i0], &self.mapped[i0 + 1]);
        let g = 1.0 - f;
        color[0] = g * a[0] + f * b[0];
        color[1] = g * a[1] + f * b[1];
        color[2] = g * a[2] + f * b[2];
        g * a[3] + f * b[3]
    }

    #[inline]
    fn classify_backward(
        &self,
        feature: &[f64],
        _color: &[f64],
        _cache: &[f64],
        d_color: &[f64],
        d_kappa: f64,
        grad: &mut [f64],
        d_feature: Option<&mut [f64]>,
    ) {
        let (i0, f) = Self::locate(feature[0]);
        let g = 1.0 - f;
        let d = [d_color[0], d_color[1], d_color[2], d_kappa];
        let lo = &mut grad[i0 * 4..i0 * 4 + 8];
        for c in 0..4 {
            lo[c] += g * d[c];
            lo[4 + c] += f * d[c];
        }
        if let Some(df) = d_feature {
            let x = feature[0];
            if (0.0..=1.0).contains(&x) {
                let (a, b) = (&self.mapped[i0], &self.mapped[i0 + 1]);
                let slope: f64 = (0..4).map(|c| (b[c] - a[c]) * d[c]).sum();
                df[0] += slope * (LOOKUP_BINS - 1) as f64;
            }
        }
    }

    /// Chains mapped-table gradients through the clamp and the κ sigmoid.
    fn finish_grad(&self, local: &[f64], param_grads: &mut [f64]) {
        for (i, raw) in self.raw.iter().enumerate() {
            for c in 0..3 {
                // Inclusive: projected parameters sitting on a bound may move back inside.
                if (0.0..=1.0).contains(&raw[c]) {
                    param_grads[self.color_offset + i * 3 + c] += local[i * 4 + c];
                }
            }
            let s = sigmoid(raw[3]);
            param_grads[self.kappa_offset + i] += local[i * 4 + 3] * self.kappa_max * s * (1.0 - s);
        }
    }
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

/// Affine layers with ReLU between them and a configurable output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Registers `widths[0] -> ... -> widths[last]` with PyTorch-style uniform
    /// fan-in initialization.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0 || w > MAX_WIDTH) {
            return Err(Error::Shape(format!("invalid MLP widths {widths:?}")));
        }
        let mut layers = Vec::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let activation = if l + 2 == widths.len() { output } else { Activation::Relu };
            layers.push(DenseLayer {
                w: store.add(&format!("{name}.{l}.w"), &[n_out, n_in], w)?,
                b: store.add(&format!("{name}.{l}.b"), &[n_out], b)?,
                n_in,
                n_out,
                activation,
            });
        }
        Ok(Self { layers })
    }

    /// Rebuilds an MLP from explicit weights (row-major `n_out x n_in`).
    pub fn register_weights(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        weights: &[(Vec<f64>, Vec<f64>)],
        output: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = n_in;
        for (l, (w, b)) in weights.iter().enumerate() {
            let n_out = b.len();
            if n_out == 0 || n_out > MAX_WIDTH || w.len() != n_out * width {
                return Err(Error::Shape(format!(
                    "layer {l} of '{name}': {} weights for {width} -> {n_out}",
                    w.len()
                )));
            }
            let activation = if l + 1 == weights.len() { output } else { Activation::Relu };
            layers.push(DenseLayer {
                w: store.add(&format!("{name}.{l}.w"), &[n_out, width], w.clone())?,
                b: store.add(&format!("{name}.{l}.b"), &[n_out], b.clone())?,
                n_in: width,
                n_out,
                activation,
            });
            width = n_out;
        }
        if layers.is_empty() {
            return Err(Error::Shape(format!("MLP '{name}' has no layers")));
        }
        Ok(Self { layers })
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_in * l.n_out + l.n_out).sum()
    }

    pub fn cache_len(&self) -> usize {
        self.layers.iter().map(|l| l.n_out).sum()
    }

    pub fn prepare<'a>(&self, store: &'a ParamStore) -> PreparedMlp<'a> {
        PreparedMlp {
            layers: self
                .layers
                .iter()
                .map(|l| PreparedLayer {
                    w: store.get(l.w),
                    b: store.get(l.b),
                    w_off: store.range(l.w).start,
                    b_off: store.range(l.b).start,
                    n_in: l.n_in,
                    n_out: l.n_out,
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Records the forward pass on a tape.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, input: NodeId) -> Result<NodeId> {
        let mut h = input;
        for l in &self.layers {
            let w = tape.param(store, l.w);
            let b = tape.param(store, l.b);
            h = tape.affine(w, h, b)?;
            h = match l.activation {
                Activation::Relu => tape.relu(h)?,
                Activation::Sigmoid => tape.sigmoid(h)?,
                Activation::Identity => h,
            };
        }
        Ok(h)
    }

    /// Plain forward without recording.
    pub fn eval(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.n_in() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.n_in(),
                input.len()
            )));
        }
        let p = self.prepare(store);
        let mut cache = vec![0.0; self.cache_len()];
        p.forward(input, &mut cache);
        Ok(cache[cache.len() - self.n_out()..].to_vec())
    }
}

#[derive(Debug, Clone)]
struct PreparedLayer<'a> {
    w: &'a [f64],
    b: &'a [f64],
    w_off: usize,
    b_off: usize,
    n_in: usize,
    n_out: usize,
    activation: Activation,
}

/// MLP bound to parameter values for fused forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct PreparedMlp<'a> {
    layers: Vec<PreparedLayer<'a>>,
}

impl PreparedMlp<'_> {
    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn cache_len(&self) -> usize {
        self.layers.iter().map(|l| l.n_out).sum()
    }

    /// Fills `cache` with every layer's activations; the output is the tail.
    #[inline]
    pub fn forward(&self, input: &[f64], cache: &mut [f64]) {
        let mut start = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let (prev, rest) = cache.split_at_mut(start);
            let x = if i == 0 { input } else { &prev[start - l.n_in..] };
            let out = &mut rest[..l.n_out];
            kernels::affine_forward(l.w, l.b, x, out);
            for v in out.iter_mut() {
                *v = l.activation.apply(*v);
            }
            start += l.n_out;
        }
    }

    /// Accumulates parameter gradients (store layout) and optionally `d_input`.
    #[inline]
    pub fn backward(&self, input: &[f64], cache: &[f64], d_out: &[f64], grad: &mut [f64], d_input: Option<&mut [f64]>) {
        let mut d_act = [0.0f64; MAX_WIDTH];
        let mut d_prev = [0.0f64; MAX_WIDTH];
        let n_last = self.n_out();
        d_act[..n_last].copy_from_slice(&d_out[..n_last]);
        let mut end = cache.len();
        let mut d_input = d_input;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let start = end - l.n_out;
            let y = &cache[start..end];
            for k in 0..l.n_out {
                d_act[k] *= l.activation.slope_from_output(y[k]);
            }
            let x = if i == 0 { input } else { &cache[start - l.n_in..start] };
            let (dw, db) = split_two(grad, l.w_off, l.w.len(), l.b_off, l.n_out);
            if i > 0 {
                d_prev[..l.n_in].fill(0.0);
                kernels::affine_backward(l.w, x, &d_act[..l.n_out], dw, db, Some(&mut d_prev[..l.n_in]));
                d_act[..l.n_in].copy_from_slice(&d_prev[..l.n_in]);
            } else {
                kernels::affine_backward(l.w, x, &d_act[..l.n_out], dw, db, d_input.as_deref_mut());
            }
            end = start;
        }
    }
}

/// Two disjoint mutable windows of one buffer.
fn split_two(buf: &mut [f64], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [f64], &mut [f64]) {
    if a < b {
        let (lo, hi) = buf.split_at_mut(b);
        (&mut lo[a..a + alen], &mut hi[..blen])
    } else {
        let (lo, hi) = buf.split_at_mut(a);
        (&mut hi[..alen], &mut lo[b..b + blen])
    }
}

/// MLP transfer function: `n_f` features to `n_c` colors plus one κ output,
/// all through a sigmoid; κ is scaled by `kappa_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTF {
    pub mlp: Mlp,
    pub n_f: usize,
    pub n_c: usize,
    pub kappa_max: f64,
}

impl MlpTF {
    /// `n_f -> hidden... -> n_c + 1` with the κ output biased to 5% of `kappa_max`.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_f: usize,
        hidden: &[usize],
        n_c: usize,
        kappa_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![n_f];
        widths.extend_from_slice(hidden);
        widths.push(n_c + 1);
        let mlp = Mlp::register(store, name, &widths, Activation::Sigmoid, rng)?;
        let last = mlp.layers.last().expect("at least one layer").b;
        store.get_mut(last)[n_c] = logit(INITIAL_KAPPA_FRACTION);
        Ok(Self {
            mlp,
            n_f,
            n_c,
            kappa_max,
        })
    }

    pub fn from_mlp(mlp: Mlp, n_c: usize, kappa_max: f64) -> Result<Self> {
        if mlp.n_out() != n_c + 1 {
            return Err(Error::Shape(format!(
                "MLP has {} outputs, expected {} colors + kappa",
                mlp.n_out(),
                n_c
            )));
        }
        Ok(Self {
            n_f: mlp.n_in(),
            mlp,
            n_c,
            kappa_max,
        })
    }

    /// Colors followed by κ.
    pub fn eval(&self, store: &ParamStore, feature: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.mlp.eval(store, feature)?;
        out[self.n_c] *= self.kappa_max;
        Ok(out)
    }

    pub fn prepare<'a>(&self, store: &'a ParamStore) -> PreparedMlpTF<'a> {
        PreparedMlpTF {
            mlp: self.mlp.prepare(store),
            n_f: self.n_f,
            n_c: self.n_c,
            cache_len: self.mlp.cache_len(),
            grad_len: store.len(),
            kappa_max: self.kappa_max,
            color_from_features: false,
        }
    }

    /// Classifier whose colors are the features themselves and whose κ comes
    /// from this MLP (which must then have zero color outputs).
    pub fn prepare_latent<'a>(&self, store: &'a ParamStore) -> PreparedMlpTF<'a> {
        debug_assert_eq!(self.n_c, 0);
        PreparedMlpTF {
            color_from_features: true,
            ..self.prepare(store)
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedMlpTF<'a> {
    mlp: PreparedMlp<'a>,
    n_f: usize,
    n_c: usize,
    cache_len: usize,
    grad_len: usize,
    kappa_max: f64,
    color_from_features: bool,
}

impl Classifier for PreparedMlpTF<'_> {
    fn n_features(&self) -> usize {
        self.n_f
    }

    fn n_colors(&self) -> usize {
        if self.color_from_features {
            self.n_f
        } else {
            self.n_c
        }
    }

    fn cache_len(&self) -> usize {
        self.cache_len
    }

    fn grad_len(&self) -> usize {
        self.grad_len
    }

    #[inline]
    fn classify(&self, feature: &[f64], color: &mut [f64], cache: &mut [f64]) -> f64 {
        self.mlp.forward(feature, cache);
        let out = &cache[self.cache_len - self.n_c - 1..];
        if self.color_from_features {
            color[..self.n_f].copy_from_slice(feature);
        } else {
            color[..self.n_c].copy_from_slice(&out[..self.n_c]);
        }
        self.kappa_max * out[self.n_c]
    }

    #[inline]
    fn classify_backward(
        &self,
        feature: &[f64],
        _color: &[f64],
        cache: &[f64],
        d_color: &[f64],
        d_kappa: f64,
        grad: &mut [f64],
        d_feature: Option<&mut [f64]>,
    ) {
        let mut d_out = [0.0; MAX_WIDTH];
        if !self.color_from_features {
            d_out[..self.n_c].copy_from_slice(&d_color[..self.n_c]);
        }
        d_out[self.n_c] = d_kappa * self.kappa_max;
        match d_feature {
            Some(df) => {
                if self.color_from_features {
                    for (d, c) in df.iter_mut().zip(d_color) {
                        *d += c;
                    }
                }
                self.mlp.backward(feature, cache, &d_out[..self.n_c + 1], grad, Some(df));
            }
            None => self.mlp.backward(feature, cache, &d_out[..self.n_c + 1], grad, None),
        }
    }

    fn finish_grad(&self, local: &[f64], param_grads: &mut [f64]) {
        for (g, l) in param_grads.iter_mut().zip(local) {
            *g += l;
        }
    }
}

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TfFile {
    Lookup {
        #[serde(default = "tf_version")]
        version: u32,
        kappa_max: f64,
        /// Raw parameters `[r, g, b, kappa_raw]` per bin.
        bins: Vec<[f64; 4]>,
    },
    Mlp {
        #[serde(default = "tf_version")]
        version: u32,
        kappa_max: f64,
        #[serde(rename = "n_F")]
        n_f: usize,
        #[serde(rename = "n_C")]
        n_c: usize,
        layers: Vec<LayerFile>,
    },
}

fn tf_version() -> u32 {
    TF_FILE_VERSION
}

/// A transfer function together with the parameters it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    pub store: ParamStore,
    pub kind: TfKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TfKind {
    Lookup(LookupTF),
    Mlp(MlpTF),
}

impl TransferFunction {
    pub fn lookup(bins: &[[f64; 4]], kappa_max: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        let tf = LookupTF::register(&mut store, "tf.lookup", bins, kappa_max)?;
        Ok(Self {
            store,
            kind: TfKind::Lookup(tf),
        })
    }

    pub fn to_file(&self) -> TfFile {
        match &self.kind {
            TfKind::Lookup(l) => TfFile::Lookup {
                version: TF_FILE_VERSION,
                kappa_max: l.kappa_max,
                bins: l.raw_bins(&self.store),
            },
            TfKind::Mlp(m) => TfFile::Mlp {
                version: TF_FILE_VERSION,
                kappa_max: m.kappa_max,
                n_f: m.n_f,
                n_c: m.n_c,
                layers: m
                    .mlp
                    .layers
                    .iter()
                    .map(|l| LayerFile {
                        w: self.store.get(l.w).to_vec(),
                        b: self.store.get(l.b).to_vec(),
                    })
                    .collect(),
            },
        }
    }

    pub fn from_file(file: &TfFile) -> Result<Self> {
        match file {
            TfFile::Lookup {
                version,
                kappa_max,
                bins,
            } => {
                check_version(*version)?;
                Self::lookup(bins, *kappa_max)
            }
            TfFile::Mlp {
                version,
                kappa_max,
                n_f,
                n_c,
                layers,
            } => {
                check_version(*version)?;
                let mut store = ParamStore::new();
                let weights: Vec<_> = layers.iter().map(|l| (l.w.clone(), l.b.clone())).collect();
                let mlp = Mlp::register_weights(&mut store, "tf.mlp", *n_f, &weights, Activation::Sigmoid)?;
                let tf = MlpTF::from_mlp(mlp, *n_c, *kappa_max)?;
                Ok(Self {
                    store,
                    kind: TfKind::Mlp(tf),
                })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&read_json::<TfFile>(path)?)
    }

    /// Loads a file that must hold a lookup table.
    pub fn load_lookup(path: &Path) -> Result<(ParamStore, LookupTF)> {
        match Self::load(path)? {
            TransferFunction {
                store,
                kind: TfKind::Lookup(l),
            } => Ok((store, l)),
            _ => Err(Error::Tf(format!("{} holds an MLP, expected a lookup table", path.display()))),
        }
    }

    pub fn kappa_max(&self) -> f64 {
        match &self.kind {
            TfKind::Lookup(l) => l.kappa_max,
            TfKind::Mlp(m) => m.kappa_max,
        }
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != TF_FILE_VERSION {
        return Err(Error::Tf(format!("unsupported TF file version {v}")));
    }
    Ok(())
}
