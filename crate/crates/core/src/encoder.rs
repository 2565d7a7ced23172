//! Volume encoders (identity, analytic gradient features, a two-layer 3-D
//! convolutional encoder) and the per-pixel image decoder.

use rand::Rng;

use crate::adjoint::{kernels, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::grid::Volume3D;
use crate::image::ImageF;
use crate::tf::{Activation, Mlp, PreparedMlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Identity,
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub volume: Volume3D,
    pub provenance: Provenance,
}

impl FeatureVolume {
    pub fn n_features(&self) -> usize {
        self.volume.channels()
    }
}

fn require_scalar(vol: &Volume3D) -> Result<()> {
    if vol.channels() != 1 {
        return Err(Error::Shape(format!("encoder needs one channel, got {}", vol.channels())));
    }
    Ok(())
}

pub fn encode_identity(vol: &Volume3D) -> FeatureVolume {
    FeatureVolume {
        volume: vol.clone(),
        provenance: Provenance::Identity,
    }
}

/// Intensity plus gradient magnitude scaled by its 99th percentile.
pub fn encode_analytic(vol: &Volume3D) -> Result<FeatureVolume> {
    require_scalar(vol)?;
    let [nx, ny, nz] = vol.dims();
    let mut mags = Vec::with_capacity(vol.num_voxels());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                mags.push(vol.gradient_central(vol.voxel_center(x, y, z)).norm());
            }
        }
    }
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((sorted.len() - 1) as f64 * 0.99).round() as usize;
    let p99 = sorted[rank];
    // Rounding noise of a flat field is not a gradient.
    let scale = if p99 > 1e-9 { 1.0 / p99 } else { 0.0 };
    let data = vol
        .data()
        .iter()
        .zip(&mags)
        .flat_map(|(&i, &m)| [i, (m * scale).clamp(0.0, 1.0)])
        .collect();
    Ok(FeatureVolume {
        volume: vol.with_data(2, data)?,
        provenance: Provenance::Analytic,
    })
}

/// `conv3(1 -> hidden) -> ReLU -> conv3(hidden -> n_f)`, zero padding, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
    pub n_f: usize,
}

impl TinyEncoder {
    pub const DEFAULT_HIDDEN: usize = 8;

    /// He-uniform weights, zero biases.
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, n_f: usize, rng: &mut R) -> Result<Self> {
        let hidden = Self::DEFAULT_HIDDEN;
        let mut init = |fan_in: usize, n: usize| -> Vec<f64> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = init(27, hidden * 27);
        let w2 = init(27 * hidden, n_f * hidden * 27);
        Ok(Self {
            w1: store.add(&format!("{name}.conv1.w"), &[hidden, 1, 27], w1)?,
            b1: store.add(&format!("{name}.conv1.b"), &[hidden], vec![0.0; hidden])?,
            w2: store.add(&format!("{name}.conv2.w"), &[n_f, hidden, 27], w2)?,
            b2: store.add(&format!("{name}.conv2.b"), &[n_f], vec![0.0; n_f])?,
            hidden,
            n_f,
        })
    }

    /// Center taps routing intensity to feature 0; everything else zero.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for id in [self.w1, self.b1, self.w2, self.b2] {
            store.get_mut(id).fill(0.0);
        }
        store.get_mut(self.w1)[13] = 1.0;
        store.get_mut(self.w2)[13] = 1.0;
    }

    /// Recording-free forward pass.
    pub fn encode(&self, store: &ParamStore, vol: &Volume3D) -> Result<FeatureVolume> {
        require_scalar(vol)?;
        let dims = vol.dims();
        let n = vol.num_voxels();
        let mut h = vec![0.0; n * self.hidden];
        kernels::conv3_forward(vol.data(), dims, 1, store.get(self.w1), store.get(self.b1), self.hidden, &mut h);
        for v in &mut h {
            *v = v.max(0.0);
        }
        let mut out = vec![0.0; n * self.n_f];
        kernels::conv3_forward(&h, dims, self.hidden, store.get(self.w2), store.get(self.b2), self.n_f, &mut out);
        Ok(FeatureVolume {
            volume: vol.with_data(self.n_f, out)?,
            provenance: Provenance::Learned,
        })
    }

    /// Records the forward pass; the returned node holds the feature data.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, vol: &Volume3D) -> Result<(NodeId, FeatureVolume)> {
        require_scalar(vol)?;
        let dims = vol.dims();
        let x = tape.constant(vol.data().to_vec());
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let h = tape.conv3(x, w1, b1, dims, 1)?;
        let h = tape.relu(h)?;
        let out = tape.conv3(h, w2, b2, dims, self.hidden)?;
        let fv = FeatureVolume {
            volume: vol.with_data(self.n_f, tape.value(out).to_vec())?,
            provenance: Provenance::Learned,
        };
        Ok((out, fv))
    }
}

/// Maps composited latent colors to RGB.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageDecoder {
    /// Pass-through for three-channel color spaces.
    Identity,
    /// `n_c -> 16 -> 3`, ReLU hidden, sigmoid output.
    Mlp(Mlp),
}

impl ImageDecoder {
    pub const HIDDEN: usize = 16;

    pub fn register_mlp<R: Rng>(store: &mut ParamStore, name: &str, n_c: usize, rng: &mut R) -> Result<Self> {
        Ok(ImageDecoder::Mlp(Mlp::register(
            store,
            name,
            &[n_c, Self::HIDDEN, 3],
            Activation::Sigmoid,
            rng,
        )?))
    }

    pub fn n_c(&self) -> usize {
        match self {
            ImageDecoder::Identity => 3,
            ImageDecoder::Mlp(m) => m.n_in(),
        }
    }

    /// Applies the decoder per pixel to an `H x W x (n_c + 1)` image whose last
    /// channel is alpha, which is copied through.
    pub fn decode_image(&self, store: &ParamStore, latent: &ImageF) -> Result<ImageF> {
        let n_c = self.n_c();
        if latent.channels() != n_c + 1 {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, image has {}",
                n_c + 1,
                latent.channels()
            )));
        }
        let mut out = ImageF::zeros(latent.width(), latent.height(), 4);
        let mut prepared = match self {
            ImageDecoder::Mlp(m) => Some((m.prepare(store), vec![0.0; m.cache_len()])),
            ImageDecoder::Identity => None,
        };
        for (src, dst) in latent.data().chunks_exact(n_c + 1).zip(out.data_mut().chunks_exact_mut(4)) {
            match prepared.as_mut() {
                None => dst[..3].copy_from_slice(&src[..3]),
                Some((p, cache)) => {
                    p.forward(&src[..n_c], cache);
                    dst[..3].copy_from_slice(&cache[cache.len() - 3..]);
                }
            }
            dst[3] = src[n_c];
        }
        Ok(out)
    }

    pub fn prepare<'a>(&self, store: &'a ParamStore) -> Option<PreparedMlp<'a>> {
        match self {
            ImageDecoder::Identity => None,
            ImageDecoder::Mlp(m) => Some(m.prepare(store)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::finite_diff_check;
    use crate::grid::{synth_volume, SceneRecipe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, n: usize) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::new([n; 3], [1.0; 3], 1, (0..n * n * n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn identity_encoder_passes_intensities() {
        let v = random_volume(1, 5);
        let f = encode_identity(&v);
        assert_eq!(f.volume.data(), v.data());
        assert_eq!(f.n_features(), 1);
        assert_eq!(f.provenance, Provenance::Identity);
    }

    #[test]
    fn analytic_features_of_constant_volume() {
        let v = Volume3D::new([6; 3], [1.0; 3], 1, vec![0.4; 216]).unwrap();
        let f = encode_analytic(&v).unwrap();
        assert_eq!(f.volume.dims(), v.dims());
        for p in f.volume.data().chunks_exact(2) {
            assert_eq!(p, &[0.4, 0.0]);
        }
    }

    #[test]
    fn analytic_gradient_peaks_on_shell_interfaces() {
        let n = 48;
        let v = synth_volume(&SceneRecipe::three_shells(), [n; 3], [1.0; 3]).unwrap();
        let f = encode_analytic(&v).unwrap();
        let voxel = 1.0 / n as f64;
        // Walk +x from the center through the outer shell (0.32..0.44).
        let (y, z) = (n / 2, n / 2);
        let mut best = (0usize, -1.0);
        for x in n / 2..n {
            let p = v.voxel_center(x, y, z);
            if p.x() > 0.37 {
                let g = f.volume.get(x, y, z, 1);
                if g > best.1 {
                    best = (x, g);
                }
            }
        }
        let r = v.voxel_center(best.0, y, z).norm();
        assert!((r - 0.44).abs() <= 2.0 * voxel, "peak at r = {r}");
    }

    #[test]
    fn analytic_normalization_is_scale_invariant() {
        let v = random_volume(2, 10);
        let half = v.with_data(1, v.data().iter().map(|x| 0.5 * x).collect()).unwrap();
        let (a, b) = (encode_analytic(&v).unwrap(), encode_analytic(&half).unwrap());
        for (p, q) in a.volume.data().chunks_exact(2).zip(b.volume.data().chunks_exact(2)) {
            assert!((p[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_initialized_encoder_reproduces_intensity() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TinyEncoder::register(&mut s, "enc", 8, &mut rng).unwrap();
        enc.set_identity(&mut s);
        let v = random_volume(3, 6);
        let f = enc.encode(&s, &v).unwrap();
        assert_eq!(f.volume.dims(), v.dims());
        assert_eq!(f.volume.spacing(), v.spacing());
        for (p, &i) in f.volume.data().chunks_exact(8).zip(v.data()) {
            assert_eq!(p[0], i);
            assert!(p[1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn encoder_gradient_matches_fd() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = TinyEncoder::register(&mut s, "enc", 3, &mut rng).unwrap();
        for v in s.get_mut(enc.b1) {
            *v = rng.gen_range(-0.2..0.2);
        }
        let v = random_volume(5, 8);
        let weights: Vec<f64> = (0..v.num_voxels() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = finite_diff_check(&mut s, 1e-5, |st, g| {
            let mut t = Tape::new();
            let (out, _) = enc.record(&mut t, st, &v).unwrap();
            let sq = t.mul(out, out).unwrap();
            let c = t.constant(weights.clone());
            let y = t.dot(sq, c).unwrap();
            if let Some(g) = g {
                t.backward_vec(y, &[1.0], g).unwrap();
            }
            t.scalar(y)
        });
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
        assert!(report.checked * 10 > s.len() * 9, "only {} of {} scored", report.checked, s.len());
        let mut t = Tape::new();
        let (_, recorded) = enc.record(&mut t, &s, &v).unwrap();
        assert_eq!(recorded, enc.encode(&s, &v).unwrap());
    }

    #[test]
    fn encoder_is_translation_equivariant_in_interior() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = TinyEncoder::register(&mut s, "enc", 4, &mut rng).unwrap();
        let n = 10;
        let v = random_volume(7, n);
        let mut shifted = v.clone();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    shifted.set(x, y, z, 0, v.get((x + n - 1) % n, y, z, 0));
                }
            }
        }
        let (a, b) = (enc.encode(&s, &v).unwrap(), enc.encode(&s, &shifted).unwrap());
        for z in 2..n - 2 {
            for y in 2..n - 2 {
                for x in 3..n - 2 {
                    for c in 0..4 {
                        assert_eq!(b.volume.get(x, y, z, c), a.volume.get(x - 1, y, z, c));
                    }
                }
            }
        }
    }

    #[test]
    fn decoder_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let latent = ImageF::new(3, 2, 4, (0..24).map(|_| rng.gen()).collect()).unwrap();
        let s = ParamStore::new();
        let out = ImageDecoder::Identity.decode_image(&s, &latent).unwrap();
        assert_eq!(out, latent);

        let mut s = ParamStore::new();
        let dec = ImageDecoder::register_mlp(&mut s, "dec", 8, &mut rng).unwrap();
        s.values_mut().fill(0.0);
        let latent = ImageF::new(2, 2, 9, (0..36).map(|_| rng.gen()).collect()).unwrap();
        let out = dec.decode_image(&s, &latent).unwrap();
        for (p, q) in out.data().chunks_exact(4).zip(latent.data().chunks_exact(9)) {
            assert_eq!(&p[..3], &[0.5; 3]);
            assert_eq!(p[3], q[8]);
        }
        assert!(matches!(dec.decode_image(&s, &ImageF::zeros(2, 2, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn encoders_keep_geometry() {
        let v = synth_volume(&SceneRecipe::three_shells(), [12, 10, 8], [1.0, 1.0, 2.0]).unwrap();
        let a = encode_analytic(&v).unwrap();
        assert_eq!((a.volume.dims(), a.volume.spacing()), (v.dims(), v.spacing()));
        assert_eq!(a.volume.bbox(), v.bbox());
    }
}
