//! Pinhole cameras, image-space grids and colored point clouds.
//!
//! Conventions used throughout the engine:
//! - pixel `(x, y)` has its center at integer image coordinates, so a camera
//!   ray through pixel `(x, y)` has direction `((x - cx) / fx, (y - cy) / fy, 1)`;
//! - poses map world to camera, `p_cam = R * p_world + t`;
//! - the world frame is the frame of the first (input) camera;
//! - depth is camera-frame `z`, not ray length.

mod io;
mod raster;

pub use io::{
    read_depth_pfm, read_mask_png, read_ply, read_rgb_png, write_depth_pfm, write_mask_png,
    write_ply, write_rgb_png,
};
pub use raster::{render_pointcloud, unproject, unproject_masked, zbuffer, ZBuffer};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::contract("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::contract("cx outside [0, width)"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::contract("cy outside [0, height)"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a camera-frame point; `None` behind (or on) the image plane.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame ray through pixel coordinates, normalized to `z = 1`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, which must be unit
    /// length to within `1e-9`.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "pose quaternion norm {norm} is not unit"
            )));
        }
        Ok(Self {
            rotation: UnitQuaternion::new_unchecked(quat),
            translation: Vector3::new(t[0], t[1], t[2]),
        })
    }

    /// Camera placed at `center` (world frame), turned by `yaw` about the world
    /// y axis and then `pitch` about its own x axis. Zero angles look down +z.
    pub fn look_from(center: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        let cam_to_world = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch);
        let rotation = cam_to_world.inverse();
        let translation = -(rotation * center);
        Self {
            rotation,
            translation,
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Unit viewing direction (camera +z) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.inverse() * Vector3::z()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRecord {
            q: self.wxyz(),
            t: self.xyz(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        CameraPose::from_wxyz(rec.q, rec.t).map_err(serde::de::Error::custom)
    }
}

/// H×W RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            rgb: vec![color; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut rgb = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                rgb.push(f(x, y));
            }
        }
        Self { width, height, rgb }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.rgb[y * self.width + x] = c;
    }

    pub fn same_size<T: Grid>(&self, other: &T) -> bool {
        self.width == other.width() && self.height == other.height()
    }

    pub fn clamped(mut self) -> Self {
        for px in &mut self.rgb {
            for c in px.iter_mut() {
                *c = c.clamp(0.0, 1.0);
            }
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        self.rgb.len() == self.width * self.height
            && self
                .rgb
                .iter()
                .all(|px| px.iter().all(|c| (0.0..=1.0).contains(c)))
    }

    /// Mean squared error over all channels, optionally weighted by a mask.
    pub fn mse(&self, other: &ImagePlane, mask: Option<&RegionMask>) -> f64 {
        assert!(self.same_size(other), "image size mismatch");
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (a, b)) in self.rgb.iter().zip(&other.rgb).enumerate() {
            let w = mask.map_or(1.0, |m| m.weights[i]);
            if w <= 0.0 {
                continue;
            }
            for c in 0..3 {
                num += w * (a[c] - b[c]).powi(2);
            }
            den += 3.0 * w;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Peak signal-to-noise ratio in dB with unit peak.
    pub fn psnr(&self, other: &ImagePlane, mask: Option<&RegionMask>) -> f64 {
        let mse = self.mse(other, mask);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }
}

/// H×W camera-frame depths with a validity flag per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Full-validity map. Panics on non-positive or non-finite input.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        assert!(values.iter().all(|d| d.is_finite() && *d > 0.0));
        Self {
            width,
            height,
            valid: vec![true; values.len()],
            values,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        let i = y * self.width + x;
        self.values[i] = d;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn is_valid(&self) -> bool {
        self.values
            .iter()
            .zip(&self.valid)
            .all(|(d, v)| !*v || (d.is_finite() && *d > 0.0))
    }
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl RegionMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn filled(width: usize, height: usize, w: f64) -> Self {
        Self {
            width,
            height,
            weights: vec![w; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut weights = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                weights.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            weights,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// Pixels with weight above one half.
    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.weights[i] > 0.5
    }

    /// Number of pixels with nonzero weight.
    pub fn support(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            weights: self.weights.iter().map(|w| 1.0 - w).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0 || *w == 1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.weights.iter().all(|w| (0.0..=1.0).contains(w))
    }
}

/// Anything laid out on an H×W pixel grid.
pub trait Grid {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
}

macro_rules! impl_grid {
    ($($t:ty),*) => {$(
        impl Grid for $t {
            fn width(&self) -> usize { self.width }
            fn height(&self) -> usize { self.height }
        }
    )*};
}
impl_grid!(ImagePlane, DepthMap, RegionMask, CameraIntrinsics);

/// Colored points. `provenance[i]` is the expansion iteration that created
/// point `i` (0 for the input view).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub provenance: Vec<u32>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector3<f64>, color: [f64; 3], provenance: u32) {
        self.positions.push(position);
        self.colors.push(color);
        self.provenance.push(provenance);
    }

    /// Appends `other`; returns the index range the new points occupy.
    pub fn append(&mut self, other: PointCloud) -> std::ops::Range<usize> {
        let start = self.len();
        self.positions.extend(other.positions);
        self.colors.extend(other.colors);
        self.provenance.extend(other.provenance);
        start..self.len()
    }

    pub fn is_valid(&self) -> bool {
        self.positions.len() == self.colors.len()
            && self.positions.len() == self.provenance.len()
            && self
                .positions
                .iter()
                .all(|p| p.iter().all(|c| c.is_finite()))
            && self
                .colors
                .iter()
                .all(|c| c.iter().all(|v| (0.0..=1.0).contains(v)))
            && self.provenance.windows(2).all(|w| w[0] <= w[1])
    }
}
