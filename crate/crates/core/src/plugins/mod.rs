//! Contracts for the external generative models the pipeline consumes.
//!
//! The engine never looks inside a model. Every capability is a trait, a
//! [`Plugins`] set bundles one implementation of each, and two families of
//! implementations ship with the crate: the deterministic stand-ins in
//! [`synthetic`] (backed by one [`SyntheticWorld`]) and socket clients in
//! [`remote`] that talk the binary protocol in [`wire`].

pub mod remote;
pub mod synthetic;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, ImagePlane, RegionMask};

/// Camera metadata the engine already knows about an image. Real models
/// ignore it; the synthetic stand-ins need it to sample the analytic world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewHint {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Clone, Debug)]
pub struct InpaintRequest {
    pub image: ImagePlane,
    /// 1 marks pixels to synthesize.
    pub inpaint_mask: RegionMask,
    pub prompt: String,
    pub view: Option<ViewHint>,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<()> {
        if !self.image.same_size(&self.inpaint_mask) {
            return Err(Error::contract(
                "inpaint mask resolution differs from image",
            ));
        }
        Ok(())
    }
}

/// `T × C × h × w` latent tensor, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Diffusion step the tensor currently sits at (0 = clean).
    pub schedule_step: usize,
}

impl LatentVideo {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
            schedule_step: 0,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[j * n..(j + 1) * n]
    }

    pub fn frame_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[j * n..(j + 1) * n]
    }

    pub fn same_shape(&self, other: &LatentVideo) -> bool {
        self.frames == other.frames
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frame order reversed; frame `j` moves to `T - 1 - j`.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.frames {
            out.frame_mut(j)
                .copy_from_slice(self.frame(self.frames - 1 - j));
        }
        out
    }
}

/// Cumulative signal level `ᾱ_s` for `s = 0..=T_diff`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule; `ᾱ` falls from 1 at step 0 to 0 at `steps`.
    pub fn cosine(steps: usize) -> Self {
        let s = 0.008;
        let f = |i: usize| {
            let x = (i as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|i| (f(i) / f0).clamp(0.0, 1.0)).collect();
        alpha_bar[0] = 1.0;
        alpha_bar[steps] = 0.0;
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn signal(&self, step: usize) -> f64 {
        self.alpha_bar[step].sqrt()
    }

    pub fn noise_std(&self, step: usize) -> f64 {
        (1.0 - self.alpha_bar[step]).sqrt()
    }

    pub fn noise_variance(&self, step: usize) -> f64 {
        1.0 - self.alpha_bar[step]
    }
}

/// Conditioning handed to the denoiser for one video direction. The engine
/// fills in everything it knows; each plugin reads what it understands.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningPayload {
    /// The conditioning view (start frame of the generated clip).
    pub image: ImagePlane,
    /// Camera of every frame in this payload's time direction.
    pub poses: Vec<CameraPose>,
    /// Normalized timestamp of every frame in this payload's time direction.
    pub times: Vec<f64>,
    pub intrinsics: Option<CameraIntrinsics>,
    /// Model-specific motion conditioning, passed through uninterpreted.
    pub motion_scalars: Vec<f64>,
}

impl ConditioningPayload {
    /// The same clip seen backwards, conditioned on `image`.
    pub fn reversed_with(&self, image: ImagePlane) -> Self {
        Self {
            image,
            poses: self.poses.iter().rev().copied().collect(),
            times: self.times.iter().rev().copied().collect(),
            intrinsics: self.intrinsics,
            motion_scalars: self.motion_scalars.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// JSON manifest a plugin publishes about itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginManifest {
    pub capabilities: Vec<String>,
    pub latent: LatentDims,
    pub frames: usize,
    pub diffusion_steps: usize,
    pub single_flight: bool,
    pub schedule: NoiseSchedule,
}

pub trait Inpainter: Send + Sync {
    /// Deterministic given `(req, seed)`.
    fn fill(&self, req: &InpaintRequest, seed: u64) -> Result<ImagePlane>;
}

pub trait DepthEstimator: Send + Sync {
    /// Full-validity depth for `image`.
    fn estimate(&self, image: &ImagePlane, view: Option<&ViewHint>) -> Result<DepthMap>;
}

pub trait Denoiser: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Number of diffusion steps `T_diff`.
    fn steps(&self) -> usize {
        self.schedule().steps()
    }

    /// One denoising step, returning the latent at `step - 1`.
    fn step(
        &self,
        z: &LatentVideo,
        step: usize,
        condition: &ConditioningPayload,
        seed: u64,
    ) -> Result<LatentVideo>;
}

pub trait LatentCodec: Send + Sync {
    fn encode(&self, video: &[ImagePlane]) -> Result<LatentVideo>;
    fn decode(&self, z: &LatentVideo) -> Result<Vec<ImagePlane>>;
}

pub trait FrameInterpolator: Send + Sync {
    /// `count` in-between frames strictly between `a` and `b`.
    fn interpolate(&self, a: &ImagePlane, b: &ImagePlane, count: usize) -> Result<Vec<ImagePlane>>;
}

/// One implementation of every capability.
#[derive(Clone)]
pub struct Plugins {
    pub inpainter: Arc<dyn Inpainter>,
    pub depth: Arc<dyn DepthEstimator>,
    pub denoiser: Arc<dyn Denoiser>,
    pub codec: Arc<dyn LatentCodec>,
    pub interpolator: Arc<dyn FrameInterpolator>,
}

pub(crate) fn check_step(step: usize, max: usize) -> Result<()> {
    if step == 0 || step > max {
        return Err(Error::ScheduleOutOfRange { step, max });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = NoiseSchedule::cosine(25);
        assert_eq!(s.steps(), 25);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert_eq!(s.alpha_bar[25], 0.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn reverse_is_an_involution() {
        let mut z = LatentVideo::zeros(5, 2, 3, 2);
        for (i, v) in z.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let r = z.reversed();
        assert_eq!(r.frame(0), z.frame(4));
        assert_eq!(r.frame(4), z.frame(0));
        assert_eq!(r.frame(2), z.frame(2));
        assert_eq!(r.reversed(), z);
        let single = LatentVideo::zeros(1, 2, 2, 2);
        assert_eq!(single.reversed(), single);
    }
}
