//! Stage two: animate static renders along each trajectory with a video
//! denoiser. The schedule is SDEdit entry, bidirectional (time-reversal)
//! denoising between the start and end views, a forward-only refinement pass
//! and a frame-interpolated landing on the end view.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{render_pointcloud, CameraIntrinsics, ImagePlane, PointCloud};
use crate::plugins::{ConditioningPayload, Denoiser, LatentVideo, NoiseSchedule, Plugins};
use crate::trajectory::Trajectory;

const TIME_REVERSAL_STREAM: u64 = 0;
const REFINE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub tau_tr: usize,
    pub tau_refine: usize,
    /// Fusion weight used at every step unless `fuse_weights` is given.
    pub fuse_weight: f64,
    /// Optional per-step weights; entry `s − 1` applies at step `s`.
    pub fuse_weights: Vec<f64>,
    pub end_transition_n: usize,
    pub seed: u64,
    pub motion_scalars: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau_tr: 16,
            tau_refine: 9,
            fuse_weight: 0.5,
            fuse_weights: Vec::new(),
            end_transition_n: 5,
            seed: 0,
            motion_scalars: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, diffusion_steps: usize, frames: usize) -> Result<()> {
        if !(0 < self.tau_refine
            && self.tau_refine <= self.tau_tr
            && self.tau_tr <= diffusion_steps)
        {
            return Err(Error::Config(format!(
                "need 0 < tau_refine ({}) <= tau_tr ({}) <= diffusion steps ({diffusion_steps})",
                self.tau_refine, self.tau_tr
            )));
        }
        if self.end_transition_n >= frames {
            return Err(Error::Config(format!(
                "end_transition_n ({}) must be below the frame count ({frames})",
                self.end_transition_n
            )));
        }
        if !self.fuse_weights.is_empty() && self.fuse_weights.len() < self.tau_tr {
            return Err(Error::Config(format!(
                "fuse_weights has {} entries, tau_tr needs {}",
                self.fuse_weights.len(),
                self.tau_tr
            )));
        }
        let all = self
            .fuse_weights
            .iter()
            .chain(std::iter::once(&self.fuse_weight));
        if all.clone().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config("fusion weights must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn weight(&self, step: usize) -> f64 {
        self.fuse_weights
            .get(step.wrapping_sub(1))
            .copied()
            .unwrap_or(self.fuse_weight)
    }
}

/// Frame order reversed.
pub fn reverse(z: &LatentVideo) -> LatentVideo {
    z.reversed()
}

/// `w·D(z, start) + (1 − w)·reverse(D(reverse(z), end))`.
#[allow(clippy::too_many_arguments)]
pub fn time_reversal_step(
    z: &LatentVideo,
    step: usize,
    start: &ConditioningPayload,
    end: &ConditioningPayload,
    w: f64,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::contract(format!("fusion weight {w} outside [0, 1]")));
    }
    let forward = denoiser.step(z, step, start, seed)?;
    if w == 1.0 {
        return Ok(forward);
    }
    let backward = reverse(&denoiser.step(&reverse(z), step, end, seed)?);
    if w == 0.0 {
        return Ok(backward);
    }
    let mut out = forward;
    for (o, b) in out.data.iter_mut().zip(&backward.data) {
        *o = w * *o + (1.0 - w) * b;
    }
    Ok(out)
}

/// Noises a clean latent to step `tau` of `schedule`:
/// `z = √ᾱ_τ·z0 + √(1 − ᾱ_τ)·ε`, with `ε` drawn from `(seed, stream)`.
pub fn sdedit_perturb(
    z0: &LatentVideo,
    tau: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    stream: u64,
) -> Result<LatentVideo> {
    if tau > schedule.steps() {
        return Err(Error::ScheduleOutOfRange {
            step: tau,
            max: schedule.steps(),
        });
    }
    let mut out = z0.clone();
    out.schedule_step = tau;
    if tau == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (sig, sd) = (schedule.signal(tau), schedule.noise_std(tau));
    for v in out.data.iter_mut() {
        let eps: f64 = StandardNormal.sample(&mut rng);
        *v = sig * *v + sd * eps;
    }
    Ok(out)
}

/// Denoises from `z.schedule_step` down to 0 with a single condition.
pub fn denoise_forward(
    z: LatentVideo,
    cond: &ConditioningPayload,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<LatentVideo> {
    let mut z = z;
    for step in (1..=z.schedule_step).rev() {
        z = denoiser.step(&z, step, cond, seed)?;
    }
    Ok(z)
}

/// Conditioning for a clip along `traj` starting at `image`.
pub fn start_payload(
    image: &ImagePlane,
    traj: &Trajectory,
    intr: &CameraIntrinsics,
    cfg: &SamplerConfig,
) -> ConditioningPayload {
    ConditioningPayload {
        image: image.clone(),
        poses: traj.poses.clone(),
        times: (0..traj.len()).map(|j| traj.time(j)).collect(),
        intrinsics: Some(*intr),
        motion_scalars: cfg.motion_scalars.clone(),
    }
}

/// Point-cloud renders along a trajectory.
pub fn render_static_video(
    cloud: &PointCloud,
    traj: &Trajectory,
    intr: &CameraIntrinsics,
    splat_radius_px: f64,
) -> Vec<ImagePlane> {
    traj.poses
        .iter()
        .map(|p| render_pointcloud(cloud, intr, p, splat_radius_px).0)
        .collect()
}

/// Animates one static clip. The start and end views are its first and last
/// frames. `seed` selects the sample; the refinement pass draws its noise from
/// a separate stream of the same seed.
pub fn animate_video(
    static_video: &[ImagePlane],
    traj: &Trajectory,
    intr: &CameraIntrinsics,
    cfg: &SamplerConfig,
    plugins: &Plugins,
    seed: u64,
) -> Result<Vec<ImagePlane>> {
    let frames = static_video.len();
    if frames != traj.len() || frames < 2 {
        return Err(Error::contract(format!(
            "static video has {frames} frames, trajectory {}",
            traj.len()
        )));
    }
    let denoiser = plugins.denoiser.as_ref();
    cfg.validate(denoiser.steps(), frames)?;
    let start_image = &static_video[0];
    let end_image = &static_video[frames - 1];
    let start = start_payload(start_image, traj, intr, cfg);
    let end = start.reversed_with(end_image.clone());

    let z0 = plugins
        .codec
        .encode(static_video)
        .map_err(|e| e.in_stage("encode"))?;
    let mut z = sdedit_perturb(
        &z0,
        cfg.tau_tr,
        denoiser.schedule(),
        seed,
        TIME_REVERSAL_STREAM,
    )?;
    for step in (1..=cfg.tau_tr).rev() {
        z = time_reversal_step(&z, step, &start, &end, cfg.weight(step), denoiser, seed)
            .map_err(|e| e.in_stage("time-reversal denoising"))?;
    }
    let fused = plugins.codec.decode(&z).map_err(|e| e.in_stage("decode"))?;

    let z0 = plugins
        .codec
        .encode(&fused)
        .map_err(|e| e.in_stage("encode"))?;
    let z = sdedit_perturb(
        &z0,
        cfg.tau_refine,
        denoiser.schedule(),
        seed,
        REFINE_STREAM,
    )?;
    let z = denoise_forward(z, &start, denoiser, seed)
        .map_err(|e| e.in_stage("refinement denoising"))?;
    let mut video = plugins.codec.decode(&z).map_err(|e| e.in_stage("decode"))?;
    if video.len() != frames {
        return Err(Error::Plugin {
            stage: "decode".into(),
            message: format!("decoded {} frames, expected {frames}", video.len()),
        });
    }

    // Land on the end view: the last n frames become in-betweens from the last
    // kept frame to the end view, which itself closes the clip.
    let n = cfg.end_transition_n.max(1);
    let anchor = video[frames - n - 1].clone();
    let between = plugins
        .interpolator
        .interpolate(&anchor, end_image, n - 1)
        .map_err(|e| e.in_stage("frame interpolation"))?;
    for (j, img) in between.into_iter().enumerate() {
        video[frames - n + j] = img;
    }
    video[frames - 1] = end_image.clone();
    Ok(video)
}

/// Renders and animates every trajectory, video `k` with seed `cfg.seed + k`.
pub fn animate_all(
    trajs: &[Trajectory],
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    cfg: &SamplerConfig,
    plugins: &Plugins,
    splat_radius_px: f64,
) -> Result<Vec<Vec<ImagePlane>>> {
    trajs
        .par_iter()
        .enumerate()
        .map(|(k, traj)| {
            let stat = render_static_video(cloud, traj, intr, splat_radius_px);
            animate_video(
                &stat,
                traj,
                intr,
                cfg,
                plugins,
                cfg.seed.wrapping_add(k as u64),
            )
        })
        .collect()
}
