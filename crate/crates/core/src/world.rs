//! Analytic scene shared by every synthetic plugin: a tilted textured plane
//! whose texture drifts under a sinusoidal ambient motion field.
//!
//! All stand-ins sample this one world, so results of different pipeline
//! stages can be compared against an exact ground truth.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, ImagePlane};

/// One sinusoidal texture component: `amplitude * sin(kx*x + ky*y + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amplitude: f64,
}

impl Wave {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.amplitude * (self.kx * x + self.ky * y + self.phase).sin()
    }
}

/// Ambient motion. Material at plane coordinates `p` sits at `p + u(p, t)`
/// with
///
/// `u(p, t) = A * sin(2π·cycles·t) * [ s·(sin(κ·y), cos(κ·x)) + b·(cos(κ₂·y), -sin(κ₂·x)) ]`
///
/// where `(s, b)` come from a [`MotionVariant`]. The field vanishes at
/// `t = 0` and `t = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbientMotion {
    pub amplitude: f64,
    pub wavenumber: f64,
    pub alt_wavenumber: f64,
    pub cycles: u32,
    /// Spread of per-video variants around the global motion.
    pub jitter: f64,
}

/// Per-video perturbation of the motion field. `(1, 0)` is the global motion;
/// the field is linear in both coefficients, so averaging variants averages
/// the motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionVariant {
    pub scale: f64,
    pub alt: f64,
}

impl MotionVariant {
    pub const GLOBAL: MotionVariant = MotionVariant {
        scale: 1.0,
        alt: 0.0,
    };

    pub fn mean(variants: &[MotionVariant]) -> MotionVariant {
        let n = variants.len().max(1) as f64;
        MotionVariant {
            scale: variants.iter().map(|v| v.scale).sum::<f64>() / n,
            alt: variants.iter().map(|v| v.alt).sum::<f64>() / n,
        }
    }
}

impl AmbientMotion {
    pub fn still() -> Self {
        Self {
            amplitude: 0.0,
            wavenumber: 1.0,
            alt_wavenumber: 1.0,
            cycles: 1,
            jitter: 0.0,
        }
    }

    /// The variant a generator seeded with `seed` animates.
    pub fn variant(&self, seed: u64) -> MotionVariant {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        MotionVariant {
            scale: 1.0 + self.jitter * a,
            alt: self.jitter * b,
        }
    }

    pub fn displacement(&self, x: f64, y: f64, t: f64, v: MotionVariant) -> (f64, f64) {
        if self.amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let env = self.amplitude * (TAU * self.cycles as f64 * t).sin();
        let (k, k2) = (self.wavenumber, self.alt_wavenumber);
        (
            env * (v.scale * (k * y).sin() + v.alt * (k2 * y).cos()),
            env * (v.scale * (k * x).cos() - v.alt * (k2 * x).sin()),
        )
    }
}

/// Plane `z = z0 + slope * y`, textured in its `(x, y)` parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub z0: f64,
    pub slope: f64,
    pub base: [f64; 3],
    pub texture: [Vec<Wave>; 3],
    pub motion: AmbientMotion,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        let w = |kx, ky, phase, amplitude| Wave {
            kx,
            ky,
            phase,
            amplitude,
        };
        Self {
            z0: 2.0,
            slope: 0.25,
            base: [0.5, 0.45, 0.55],
            texture: [
                vec![w(2.3, 0.9, 0.3, 0.2), w(-0.8, 1.9, 1.1, 0.12)],
                vec![w(1.1, -2.6, 2.0, 0.18), w(2.0, 2.0, 0.4, 0.1)],
                vec![w(-1.7, 1.2, 4.1, 0.2), w(0.6, 2.4, 5.0, 0.1)],
            ],
            motion: AmbientMotion {
                amplitude: 0.04,
                wavenumber: 1.7,
                alt_wavenumber: 2.3,
                cycles: 1,
                jitter: 0.5,
            },
        }
    }
}

impl SyntheticWorld {
    pub fn with_motion(mut self, motion: AmbientMotion) -> Self {
        self.motion = motion;
        self
    }

    /// Texture at plane coordinates.
    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (ch, waves) in self.texture.iter().enumerate() {
            for w in waves {
                c[ch] += w.eval(x, y);
            }
            c[ch] = c[ch].clamp(0.0, 1.0);
        }
        c
    }

    /// Color seen at plane coordinates `(x, y)` at time `t`: the material that
    /// the motion carried there.
    pub fn color_at(&self, x: f64, y: f64, t: f64, v: MotionVariant) -> [f64; 3] {
        // Invert p + u(p) = q by fixed-point iteration; u is small and smooth.
        let (mut px, mut py) = (x, y);
        for _ in 0..12 {
            let (ux, uy) = self.motion.displacement(px, py, t, v);
            px = x - ux;
            py = y - uy;
        }
        self.albedo(px, py)
    }

    /// Intersects a world-space ray with the plane, returning the ray parameter.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        // n·X = z0 with n = (0, -slope, 1)
        let n = Vector3::new(0.0, -self.slope, 1.0);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.z0 - n.dot(origin)) / denom;
        (s > 0.0).then_some(s)
    }

    /// Ground-truth image and depth from `pose` at time `t`.
    pub fn render(
        &self,
        intr: &CameraIntrinsics,
        pose: &CameraPose,
        t: f64,
        v: MotionVariant,
    ) -> (ImagePlane, DepthMap) {
        let mut img = ImagePlane::new(intr.width, intr.height);
        let mut depth = DepthMap::invalid(intr.width, intr.height);
        let origin = pose.center();
        let inv = pose.rotation.inverse();
        for y in 0..intr.height {
            for x in 0..intr.width {
                let ray_cam = intr.ray(x as f64, y as f64);
                let dir = inv * ray_cam;
                if let Some(s) = self.intersect(&origin, &dir) {
                    let hit = origin + dir * s;
                    img.set(x, y, self.color_at(hit.x, hit.y, t, v));
                    // The camera-frame ray has unit z, so the parameter is the depth.
                    depth.set(x, y, s);
                }
            }
        }
        (img, depth)
    }

    pub fn render_static(
        &self,
        intr: &CameraIntrinsics,
        pose: &CameraPose,
    ) -> (ImagePlane, DepthMap) {
        self.render(intr, pose, 0.0, MotionVariant::GLOBAL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motion_vanishes_at_clip_ends() {
        let m = SyntheticWorld::default().motion;
        let v = m.variant(7);
        for t in [0.0, 1.0] {
            let (ux, uy) = m.displacement(0.3, -0.4, t, v);
            assert!(ux.abs() < 1e-15 && uy.abs() < 1e-15);
        }
        let (ux, _) = m.displacement(0.3, -0.4, 0.25, v);
        assert!(ux.abs() > 1e-3);
    }

    #[test]
    fn displacement_is_linear_in_variant() {
        let m = SyntheticWorld::default().motion;
        let vs = [m.variant(1), m.variant(2), m.variant(3)];
        let mean = MotionVariant::mean(&vs);
        let (x, y, t) = (0.7, -0.2, 0.3);
        let avg = vs
            .iter()
            .map(|v| m.displacement(x, y, t, *v))
            .fold((0.0, 0.0), |a, d| (a.0 + d.0 / 3.0, a.1 + d.1 / 3.0));
        let direct = m.displacement(x, y, t, mean);
        assert!((avg.0 - direct.0).abs() < 1e-15 && (avg.1 - direct.1).abs() < 1e-15);
    }

    #[test]
    fn depth_matches_plane_equation() {
        let world = SyntheticWorld::default();
        let intr = CameraIntrinsics::centered(56.0, 16, 16).unwrap();
        let pose = CameraPose::identity();
        let (_, depth) = world.render_static(&intr, &pose);
        for y in 0..16 {
            for x in 0..16 {
                let d = depth.get(x, y).unwrap();
                let p = intr.ray(x as f64, y as f64) * d;
                assert!((p.z - (world.z0 + world.slope * p.y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moving_color_tracks_material() {
        let world = SyntheticWorld::default();
        let v = world.motion.variant(5);
        let (px, py, t) = (0.2, 0.1, 0.3);
        let (ux, uy) = world.motion.displacement(px, py, t, v);
        let moved = world.color_at(px + ux, py + uy, t, v);
        let src = world.albedo(px, py);
        for c in 0..3 {
            assert!((moved[c] - src[c]).abs() < 1e-9);
        }
    }
}
