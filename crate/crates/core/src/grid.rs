//! Volume storage, trilinear sampling, analytic derivatives, phantom synthesis
//! and raw volume I/O.
//!
//! Volumes live in a normalized world frame: the bounding box is centered at
//! the origin and its longest edge has length 1. Voxel values sit at voxel
//! centers; sampling outside the box clamps to the boundary voxels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::math::{Aabb, Vec3};

/// Dense 3D grid, channel-innermost and x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    data: Vec<f64>,
    voxel: [f64; 3],
    bbox: Aabb,
    window: Option<(f64, f64)>,
}

/// Corner offsets and weights of one trilinear lookup.
///
/// Offsets index the first channel of each corner voxel in the data array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub offsets: [usize; 8],
    pub weights: [f64; 8],
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2] * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "volume data has {} values, expected {expected}",
                data.len()
            )));
        }
        let longest = (0..3)
            .map(|a| dims[a] as f64 * spacing[a])
            .fold(0.0_f64, f64::max);
        let voxel = [spacing[0] / longest, spacing[1] / longest, spacing[2] / longest];
        let half = Vec3::new(
            0.5 * dims[0] as f64 * voxel[0],
            0.5 * dims[1] as f64 * voxel[1],
            0.5 * dims[2] as f64 * voxel[2],
        );
        Ok(Self {
            dims,
            spacing,
            channels,
            data,
            voxel,
            bbox: Aabb { min: -half, max: half },
            window: None,
        })
    }

    /// Zero-filled volume with the layout of `self` but a different channel count.
    pub fn zeros_like(&self, channels: usize) -> Self {
        let mut v = Self::new(
            self.dims,
            self.spacing,
            channels,
            vec![0.0; self.num_voxels() * channels],
        )
        .expect("layout already validated");
        v.window = self.window;
        v
    }

    pub fn with_data(&self, channels: usize, data: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(self.dims, self.spacing, channels, data)?;
        v.window = self.window;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    /// Voxel edge lengths in world units.
    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel
    }

    /// Smallest voxel edge in world units, the `d_v` of the step-size rule.
    pub fn min_voxel_size(&self) -> f64 {
        self.voxel.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Intensity window applied at load time, if any.
    pub fn window(&self) -> Option<(f64, f64)> {
        self.window
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.voxel_index(x, y, z) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f64) {
        let i = self.voxel_index(x, y, z) * self.channels + c;
        self.data[i] = v;
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(
            self.bbox.min[0] + (x as f64 + 0.5) * self.voxel[0],
            self.bbox.min[1] + (y as f64 + 0.5) * self.voxel[1],
            self.bbox.min[2] + (z as f64 + 0.5) * self.voxel[2],
        )
    }

    /// Trilinear stencil for a world position, clamp-to-edge.
    #[inline]
    pub fn stencil(&self, p: Vec3) -> Stencil {
        let mut i0 = [0usize; 3];
        let mut step = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = ((p[a] - self.bbox.min[a]) / self.voxel[a] - 0.5).clamp(0.0, (n - 1) as f64);
            if n == 1 {
                continue;
            }
            let base = (u.floor() as usize).min(n - 2);
            i0[a] = base;
            step[a] = 1;
            frac[a] = u - base as f64;
        }
        let c = self.channels;
        let sx = step[0] * c;
        let sy = step[1] * self.dims[0] * c;
        let sz = step[2] * self.dims[0] * self.dims[1] * c;
        let base = self.voxel_index(i0[0], i0[1], i0[2]) * c;
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Stencil {
            offsets: [
                base,
                base + sx,
                base + sy,
                base + sx + sy,
                base + sz,
                base + sx + sz,
                base + sy + sz,
                base + sx + sy + sz,
            ],
            weights: [
                gx * gy * gz,
                fx * gy * gz,
                gx * fy * gz,
                fx * fy * gz,
                gx * gy * fz,
                fx * gy * fz,
                gx * fy * fz,
                fx * fy * fz,
            ],
        }
    }

    /// Interpolates every channel at `p` into `out`.
    #[inline]
    pub fn sample_into(&self, p: Vec3, out: &mut [f64]) {
        let st = self.stencil(p);
        self.gather(&st, out);
    }

    #[inline]
    pub fn gather(&self, st: &Stencil, out: &mut [f64]) {
        out[..self.channels].fill(0.0);
        for k in 0..8 {
            let w = st.weights[k];
            let src = &self.data[st.offsets[k]..st.offsets[k] + self.channels];
            for (o, v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }

    /// Adjoint of [`Volume3D::gather`]: spreads a per-channel gradient back onto
    /// the corner voxels of `grad` (a buffer with this volume's layout).
    #[inline]
    pub fn scatter(&self, st: &Stencil, d_out: &[f64], grad: &mut [f64]) {
        for k in 0..8 {
            let w = st.weights[k];
            let dst = &mut grad[st.offsets[k]..st.offsets[k] + self.channels];
            for (g, d) in dst.iter_mut().zip(d_out) {
                *g += w * d;
            }
        }
    }

    pub fn sample_trilinear(&self, p: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(p, &mut out);
        out
    }

    /// Channel-0 central-difference gradient with a one-voxel step per axis.
    pub fn gradient_central(&self, p: Vec3) -> Vec3 {
        let mut g = [0.0; 3];
        let mut buf = vec![0.0; self.channels];
        for a in 0..3 {
            let h = self.voxel[a];
            let mut off = [0.0; 3];
            off[a] = h;
            let d = Vec3(off);
            self.sample_into(p + d, &mut buf);
            let fwd = buf[0];
            self.sample_into(p - d, &mut buf);
            g[a] = (fwd - buf[0]) / (2.0 * h);
        }
        Vec3(g)
    }
}

// ---------------------------------------------------------------------------
// Raw I/O

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    U8,
    U16,
    F32,
}

impl ScalarType {
    pub fn size(self) -> usize {
        match self {
            ScalarType::U8 => 1,
            ScalarType::U16 => 2,
            ScalarType::F32 => 4,
        }
    }

    fn default_window(self) -> (f64, f64) {
        match self {
            ScalarType::U8 => (0.0, 255.0),
            ScalarType::U16 => (0.0, 65535.0),
            ScalarType::F32 => (0.0, 1.0),
        }
    }
}

/// On-disk description of a raw volume. `path` is resolved relative to the
/// manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub path: PathBuf,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
}

fn one() -> usize {
    1
}

impl VolumeManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn scalar_type(&self) -> Result<ScalarType> {
        match self.dtype.as_str() {
            "u8" => Ok(ScalarType::U8),
            "u16" => Ok(ScalarType::U16),
            "f32" => Ok(ScalarType::F32),
            other => Err(Error::Format(format!("unknown volume dtype '{other}'"))),
        }
    }

    pub fn expected_bytes(&self) -> Result<usize> {
        Ok(self.dims.iter().product::<usize>() * self.channels * self.scalar_type()?.size())
    }
}

/// Loads a volume and window-normalizes it to [0, 1].
pub fn load_volume(manifest: &VolumeManifest, base_dir: &Path) -> Result<Volume3D> {
    let ty = manifest.scalar_type()?;
    let path = base_dir.join(&manifest.path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest.expected_bytes()?;
    if bytes.len() != expected {
        return Err(Error::Manifest(format!(
            "{} holds {} bytes, manifest implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let (lo, hi) = manifest
        .window
        .map(|[lo, hi]| (lo, hi))
        .unwrap_or_else(|| ty.default_window());
    if !(hi > lo) {
        return Err(Error::Manifest(format!("window [{lo}, {hi}] is empty")));
    }
    let raw: Vec<f64> = match ty {
        ScalarType::U8 => bytes.iter().map(|&b| b as f64).collect(),
        ScalarType::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ScalarType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    let scale = hi - lo;
    let data = raw.into_iter().map(|v| ((v - lo) / scale).clamp(0.0, 1.0)).collect();
    let mut vol = Volume3D::new(manifest.dims, manifest.spacing, manifest.channels, data)?;
    vol.window = Some((lo, hi));
    Ok(vol)
}

/// Reads a manifest file and the raw data it points to.
pub fn load_volume_file(manifest_path: &Path) -> Result<Volume3D> {
    let manifest = VolumeManifest::read(manifest_path)?;
    load_volume(&manifest, manifest_path.parent().unwrap_or(Path::new(".")))
}

/// Writes `vol` as a raw file next to `manifest_path` plus the manifest.
/// Integer encodings quantize the [0, 1] range onto the full type range.
pub fn save_volume(vol: &Volume3D, manifest_path: &Path, dtype: ScalarType) -> Result<VolumeManifest> {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let raw_name = PathBuf::from(format!("{stem}.raw"));
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut bytes = Vec::with_capacity(vol.data.len() * dtype.size());
    match dtype {
        ScalarType::U8 => bytes.extend(vol.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
        ScalarType::U16 => {
            for &v in &vol.data {
                let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
                bytes.extend_from_slice(&q.to_le_bytes());
            }
        }
        ScalarType::F32 => {
            for &v in &vol.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let raw_path = dir.join(&raw_name);
    std::fs::write(&raw_path, &bytes).map_err(|e| Error::io(&raw_path, e))?;
    let (lo, hi) = dtype.default_window();
    let manifest = VolumeManifest {
        path: raw_name,
        dims: vol.dims,
        spacing: vol.spacing,
        dtype: match dtype {
            ScalarType::U8 => "u8",
            ScalarType::U16 => "u16",
            ScalarType::F32 => "f32",
        }
        .into(),
        channels: vol.channels,
        window: Some([lo, hi]),
    };
    manifest.write(manifest_path)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Phantom synthesis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    #[default]
    Replace,
    Add,
}

/// Primitive shapes in world coordinates (volume centered at the origin,
/// longest edge 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        intensity: f64,
        #[serde(default)]
        blend: Blend,
    },
    Shell {
        center: [f64; 3],
        radius: f64,
        thickness: f64,
        intensity: f64,
        #[serde(default)]
        blend: Blend,
    },
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        intensity: f64,
        #[serde(default)]
        blend: Blend,
    },
}

impl Primitive {
    fn blend(&self) -> Blend {
        match self {
            Primitive::Sphere { blend, .. } | Primitive::Shell { blend, .. } | Primitive::Box { blend, .. } => *blend,
        }
    }

    fn intensity(&self) -> f64 {
        match self {
            Primitive::Sphere { intensity, .. }
            | Primitive::Shell { intensity, .. }
            | Primitive::Box { intensity, .. } => *intensity,
        }
    }

    /// Signed distance, negative inside.
    fn signed_distance(&self, p: Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - Vec3(*center)).norm() - radius,
            Primitive::Shell {
                center,
                radius,
                thickness,
                ..
            } => ((p - Vec3(*center)).norm() - radius).abs() - 0.5 * thickness,
            Primitive::Box { center, half_size, .. } => {
                let d = p - Vec3(*center);
                let q = Vec3::new(
                    d[0].abs() - half_size[0],
                    d[1].abs() - half_size[1],
                    d[2].abs() - half_size[2],
                );
                let outside = Vec3::new(q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)).norm();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub primitives: Vec<Primitive>,
}

impl SceneRecipe {
    /// Nested shells at intensities 0.3 / 0.6 / 0.9 around a dense core.
    pub fn three_shells() -> Self {
        let shell = |radius: f64, thickness: f64, intensity: f64| Primitive::Shell {
            center: [0.0; 3],
            radius,
            thickness,
            intensity,
            blend: Blend::Replace,
        };
        SceneRecipe {
            primitives: vec![
                shell(0.38, 0.12, 0.3),
                shell(0.24, 0.1, 0.6),
                Primitive::Sphere {
                    center: [0.0; 3],
                    radius: 0.12,
                    intensity: 0.9,
                    blend: Blend::Replace,
                },
            ],
        }
    }
}

impl SceneRecipe {
    /// A solid ball beside a hollow shell of the same outer radius, at
    /// intensities `ball` and `shell`. With equal intensities only spatial
    /// context tells them apart.
    pub fn twins(ball: f64, shell: f64) -> Self {
        SceneRecipe {
            primitives: vec![
                Primitive::Sphere {
                    center: [-0.25, 0.0, 0.0],
                    radius: 0.22,
                    intensity: ball,
                    blend: Blend::Replace,
                },
                Primitive::Shell {
                    center: [0.25, 0.0, 0.0],
                    radius: 0.22,
                    thickness: 0.08,
                    intensity: shell,
                    blend: Blend::Replace,
                },
            ],
        }
    }

    /// Built-in recipes by name: `three-shells`, `twins` (both 0.5) and
    /// `twins-labels` (ball 0.3, shell 0.8).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "three-shells" | "shells" => Some(Self::three_shells()),
            "twins" => Some(Self::twins(0.5, 0.5)),
            "twins-labels" => Some(Self::twins(0.3, 0.8)),
            _ => None,
        }
    }
}

/// Rasterizes a recipe with a one-voxel linear falloff at primitive surfaces.
pub fn synth_volume(recipe: &SceneRecipe, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume3D> {
    if recipe.primitives.is_empty() {
        return Err(Error::Recipe("recipe has no primitives".into()));
    }
    for p in &recipe.primitives {
        let ok = match p {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Shell { radius, thickness, .. } => *radius > 0.0 && *thickness > 0.0,
            Primitive::Box { half_size, .. } => half_size.iter().all(|&h| h > 0.0),
        };
        if !ok || !p.intensity().is_finite() {
            return Err(Error::Recipe(format!("degenerate primitive {p:?}")));
        }
    }
    let mut vol = Volume3D::new(dims, spacing, 1, vec![0.0; dims.iter().product()])?;
    let width = vol.min_voxel_size();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = vol.voxel_center(x, y, z);
                let mut v = 0.0;
                for prim in &recipe.primitives {
                    let cover = (0.5 - prim.signed_distance(pos) / width).clamp(0.0, 1.0);
                    if cover == 0.0 {
                        continue;
                    }
                    v = match prim.blend() {
                        Blend::Replace => v * (1.0 - cover) + prim.intensity() * cover,
                        Blend::Add => v + prim.intensity() * cover,
                    };
                }
                vol.set(x, y, z, 0, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(vol)
}
