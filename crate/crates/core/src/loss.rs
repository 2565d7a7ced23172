//! Image losses and quality metrics: MSE, Gaussian-window SSIM on luminance,
//! and their sum. Every loss comes with an analytic gradient w.r.t. the
//! prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Mse,
    #[default]
    MseSsim,
}

fn check_pair(a: &ImageF, b: &ImageF) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "images differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// MSE and its gradient w.r.t. `pred`, accumulated into `grad`.
pub fn mse_grad(pred: &ImageF, target: &ImageF, grad: &mut [f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let n = pred.data().len() as f64;
    let mut sum = 0.0;
    for ((g, p), t) in grad.iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g += 2.0 * d / n;
    }
    Ok(sum / n)
}

/// Gray image: single channels pass through, color uses Rec. 601 luma.
pub fn luminance(img: &ImageF) -> Result<Vec<f64>> {
    match img.channels() {
        1 => Ok(img.data().to_vec()),
        3 | 4 => Ok(img
            .data()
            .chunks_exact(img.channels())
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()),
        c => Err(Error::Shape(format!("no luminance for {c} channels"))),
    }
}

/// Separable "valid" correlation; output is `(w-k+1) x (h-k+1)`.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                acc += t * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `(w-k+1) x (h-k+1)` map back to `w x h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (j, t) in taps.iter().enumerate() {
                tmp[(y + j) * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, t) in taps.iter().enumerate() {
                out[y * w + x + i] += t * v;
            }
        }
    }
    out
}

struct SsimMaps {
    value: f64,
    /// Per-window derivatives w.r.t. μx, E[x²], E[xy], already divided by the window count.
    d_mu: Vec<f64>,
    d_ex2: Vec<f64>,
    d_exy: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize, cfg: &SsimConfig, want_grad: bool) -> SsimMaps {
    let taps = cfg.taps();
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let ex2 = filter_valid(&xx, w, h, &taps);
    let ey2 = filter_valid(&yy, w, h, &taps);
    let exy = filter_valid(&xy, w, h, &taps);
    let n = mx.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let (mut d_mu, mut d_ex2, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let sx = ex2[p] - ux * ux;
        let sy = ey2[p] - uy * uy;
        let sxy = exy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sx + sy + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let ds_dsx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            let ds_dux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
            d_mu[p] = (ds_dux - 2.0 * ux * ds_dsx - uy * ds_dsxy) * inv_n;
            d_ex2[p] = ds_dsx * inv_n;
            d_exy[p] = ds_dsxy * inv_n;
        }
    }
    SsimMaps {
        value: total * inv_n,
        d_mu,
        d_ex2,
        d_exy,
    }
}

fn check_window(img: &ImageF, cfg: &SsimConfig) -> Result<()> {
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(Error::Config(format!("SSIM window {} must be odd", cfg.window)));
    }
    if img.width() < cfg.window || img.height() < cfg.window {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            window: cfg.window,
        });
    }
    Ok(())
}

/// Mean SSIM over all fully contained windows of the luminance images.
pub fn ssim(a: &ImageF, b: &ImageF, cfg: &SsimConfig) -> Result<f64> {
    check_pair(a, b)?;
    check_window(a, cfg)?;
    let (x, y) = (luminance(a)?, luminance(b)?);
    Ok(ssim_maps(&x, &y, a.width(), a.height(), cfg, false).value)
}

/// SSIM and its gradient w.r.t. `pred`, accumulated into `grad`.
pub fn ssim_grad(pred: &ImageF, target: &ImageF, cfg: &SsimConfig, scale: f64, grad: &mut [f64]) -> Result<f64> {
    check_pair(pred, target)?;
    check_window(pred, cfg)?;
    let (w, h) = (pred.width(), pred.height());
    let (x, y) = (luminance(pred)?, luminance(target)?);
    let maps = ssim_maps(&x, &y, w, h, cfg, true);
    let taps = cfg.taps();
    let g_mu = filter_valid_adjoint(&maps.d_mu, w, h, &taps);
    let g_ex2 = filter_valid_adjoint(&maps.d_ex2, w, h, &taps);
    let g_exy = filter_valid_adjoint(&maps.d_exy, w, h, &taps);
    let c = pred.channels();
    for k in 0..w * h {
        let dx = scale * (g_mu[k] + 2.0 * x[k] * g_ex2[k] + y[k] * g_exy[k]);
        match c {
            1 => grad[k] += dx,
            _ => {
                for (ch, l) in LUMA.iter().enumerate() {
                    grad[k * c + ch] += dx * l;
                }
            }
        }
    }
    Ok(maps.value)
}

/// `mse + (1 - ssim)`, or plain MSE.
pub fn combined_loss(pred: &ImageF, target: &ImageF, mode: LossMode, cfg: &SsimConfig) -> Result<f64> {
    let m = mse(pred, target)?;
    Ok(match mode {
        LossMode::Mse => m,
        LossMode::MseSsim => m + 1.0 - ssim(pred, target, cfg)?,
    })
}

/// Loss value with its gradient w.r.t. `pred` accumulated into `grad`.
pub fn combined_loss_grad(
    pred: &ImageF,
    target: &ImageF,
    mode: LossMode,
    cfg: &SsimConfig,
    grad: &mut [f64],
) -> Result<f64> {
    if grad.len() != pred.data().len() {
        return Err(Error::Shape("gradient buffer does not match image".into()));
    }
    let m = mse_grad(pred, target, grad)?;
    Ok(match mode {
        LossMode::Mse => m,
        LossMode::MseSsim => m + 1.0 - ssim_grad(pred, target, cfg, -1.0, grad)?,
    })
}
