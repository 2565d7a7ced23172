//! Perspective cameras, pixel rays, ray/box clipping, view sets on a sphere
//! and per-ray jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

pub const DEFAULT_FOV_DEG: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub center: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn hits(&self) -> bool {
        self.t_near <= self.t_far
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Orthonormal look-at frame: forward, right, up.
#[derive(Debug, Clone, Copy)]
struct Basis {
    forward: Vec3,
    right: Vec3,
    up: Vec3,
}

impl Camera {
    pub fn look_at(eye: Vec3, center: Vec3, up: Vec3) -> Self {
        Self {
            eye,
            center,
            up,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eye.is_finite() && self.center.is_finite() && self.up.is_finite()) {
            return Err(Error::Camera("non-finite camera vectors".into()));
        }
        let view = self.center - self.eye;
        if view.norm() < 1e-12 {
            return Err(Error::Camera("eye coincides with center".into()));
        }
        let f = view.normalized();
        if self.up.norm() < 1e-12 || f.cross(self.up.normalized()).norm() < 1e-9 {
            return Err(Error::Camera("up vector is parallel to the view direction".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Camera(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        Ok(())
    }

    fn basis(&self) -> Basis {
        let forward = (self.center - self.eye).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        Basis { forward, right, up }
    }
}

/// Slab test. Misses return `t_near > t_far`; hits are clipped to `t >= 0`.
pub fn clip_to_box(origin: Vec3, dir: Vec3, bbox: &Aabb) -> (f64, f64) {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < bbox.min[a] || origin[a] > bbox.max[a] {
                return (f64::INFINITY, f64::NEG_INFINITY);
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((bbox.min[a] - origin[a]) * inv, (bbox.max[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 > t1 {
        (f64::INFINITY, f64::NEG_INFINITY)
    } else {
        (t0, t1)
    }
}

/// One ray per pixel center, row-major from the top-left pixel.
pub fn generate_rays(cam: &Camera, width: usize, height: usize, bbox: &Aabb) -> Result<Vec<Ray>> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!("image size {width}x{height} must be positive")));
    }
    cam.validate()?;
    let b = cam.basis();
    let tan_half = (cam.fov_deg.to_radians() * 0.5).tan();
    let aspect = width as f64 / height as f64;
    let mut rays = Vec::with_capacity(width * height);
    for j in 0..height {
        let v = (1.0 - 2.0 * (j as f64 + 0.5) / height as f64) * tan_half;
        for i in 0..width {
            let u = (2.0 * (i as f64 + 0.5) / width as f64 - 1.0) * tan_half * aspect;
            let dir = (b.forward + b.right * u + b.up * v).normalized();
            let (t_near, t_far) = clip_to_box(cam.eye, dir, bbox);
            rays.push(Ray {
                origin: cam.eye,
                dir,
                t_near,
                t_far,
            });
        }
    }
    Ok(rays)
}

/// Fibonacci-spiral cameras looking at the origin. The seed rotates the whole
/// spiral about the z axis; `n = 1` yields a single camera on +z.
pub fn sphere_views(n: usize, radius: f64, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let dir = if n == 1 {
                Vec3::new(0.0, 0.0, 1.0)
            } else {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = phase + golden * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            };
            let up = if dir.y().abs() > 0.99 {
                Vec3::new(0.0, 0.0, 1.0)
            } else {
                Vec3::new(0.0, 1.0, 0.0)
            };
            Camera::look_at(dir * radius, Vec3::ZERO, up)
        })
        .collect()
}

/// Uniform offset in `[0, t_jmax)`.
#[inline]
pub fn jitter_offset<R: Rng + ?Sized>(rng: &mut R, t_jmax: f64) -> f64 {
    if t_jmax <= 0.0 {
        return 0.0;
    }
    rng.gen::<f64>() * t_jmax
}
