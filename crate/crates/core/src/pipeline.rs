//! The three stages wired together from a [`ForgeConfig`]. Each stage takes
//! the previous stage's outputs explicitly so callers can persist and resume
//! between them.

use std::path::PathBuf;

use crate::anim::animate_all;
use crate::config::{ForgeConfig, PluginBackend};
use crate::error::{Error, Result};
use crate::expansion::{expand_scene, initial_cloud, orbit_plan, ExpansionStep};
use crate::gaussian::{
    canonical_views, train_4d, train_canonical, GaussianSplat, Scene4D, TrainView, VideoSet,
};
use crate::geometry::{render_pointcloud, CameraPose, ImagePlane, PointCloud, RegionMask};
use crate::plugins::synthetic::synthetic_manifest;
use crate::plugins::{remote, PluginManifest, Plugins};
use crate::trajectory::{plan_videos, Trajectory};
use crate::visibility::{assign_owners, build_masks, view_stats_rendered};

pub const PLUGIN_SOCKET_ENV: &str = "FORGE_PLUGIN_SOCKET";

/// Plugins for `cfg`, checked against the config.
pub fn connect_plugins(cfg: &ForgeConfig) -> Result<(Plugins, PluginManifest)> {
    let (plugins, manifest) = match cfg.plugins.backend {
        PluginBackend::Synthetic => (
            Plugins::synthetic(cfg.world.clone(), &cfg.synthetic),
            synthetic_manifest(&cfg.synthetic, cfg.camera.width, cfg.camera.height),
        ),
        PluginBackend::Remote => {
            let path = std::env::var_os(PLUGIN_SOCKET_ENV)
                .map(PathBuf::from)
                .or_else(|| cfg.plugins.socket.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "remote plugins need {PLUGIN_SOCKET_ENV} or plugins.socket"
                    ))
                })?;
            remote::connect(&path)?
        }
    };
    check_manifest(&manifest, cfg)?;
    Ok((plugins, manifest))
}

pub fn check_manifest(manifest: &PluginManifest, cfg: &ForgeConfig) -> Result<()> {
    if manifest.frames != cfg.animation.frames {
        return Err(Error::Config(format!(
            "plugin generates {} frames but animation.frames is {}",
            manifest.frames, cfg.animation.frames
        )));
    }
    cfg.sampler
        .validate(manifest.diffusion_steps, cfg.animation.frames)
}

/// The input view of the synthetic world, for runs without a real image.
pub fn synthetic_input(cfg: &ForgeConfig) -> Result<ImagePlane> {
    let intr = cfg.camera.intrinsics()?;
    Ok(cfg.world.render_static(&intr, &CameraPose::identity()).0)
}

/// Stage one output.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub input: ImagePlane,
    pub cloud: PointCloud,
    pub steps: Vec<ExpansionStep>,
}

/// Lifts `input` to a point cloud and grows it along `plan`, or along the
/// configured orbit when no plan is given.
pub fn expand(
    input: &ImagePlane,
    plan: Option<&[CameraPose]>,
    cfg: &ForgeConfig,
    plugins: &Plugins,
) -> Result<Expansion> {
    let intr = cfg.camera.intrinsics()?;
    if (input.width, input.height) != (intr.width, intr.height) {
        return Err(Error::Config(format!(
            "input is {}x{} but the camera is {}x{}",
            input.width, input.height, intr.width, intr.height
        )));
    }
    let orbit;
    let plan = match plan {
        Some(p) => p,
        None => {
            orbit = orbit_plan(cfg.expansion.steps, cfg.expansion.max_yaw);
            &orbit
        }
    };
    let init = initial_cloud(input, &intr, plugins)?;
    let (cloud, steps) = expand_scene(&init, plan, &intr, plugins, &cfg.expansion.stage())?;
    Ok(Expansion {
        input: input.clone(),
        cloud,
        steps,
    })
}

/// Stage two output: `videos[k][j]` is frame `j` of the video along
/// `trajectories[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Animation {
    pub trajectories: Vec<Trajectory>,
    pub videos: Vec<Vec<ImagePlane>>,
}

pub fn animate(exp: &Expansion, cfg: &ForgeConfig, plugins: &Plugins) -> Result<Animation> {
    let intr = cfg.camera.intrinsics()?;
    let radius = cfg.expansion.splat_radius_px;
    let trajectories = plan_videos(
        &exp.steps,
        cfg.animation.videos,
        &exp.cloud,
        &intr,
        cfg.animation.frames,
        radius,
    )?;
    let videos = animate_all(
        &trajectories,
        &exp.cloud,
        &intr,
        &cfg.sampler,
        plugins,
        radius,
    )?;
    Ok(Animation {
        trajectories,
        videos,
    })
}

/// Per-video, per-frame visibility masks.
pub fn masks(exp: &Expansion, anim: &Animation, cfg: &ForgeConfig) -> Result<Vec<Vec<RegionMask>>> {
    let intr = cfg.camera.intrinsics()?;
    let radius = cfg.expansion.splat_radius_px;
    let stats: Vec<_> = anim
        .trajectories
        .iter()
        .map(|t| view_stats_rendered(&exp.cloud, t, &intr, radius))
        .collect();
    let assign = assign_owners(&stats, cfg.visibility.beta);
    Ok(build_masks(
        &assign,
        &exp.cloud,
        &anim.trajectories,
        &intr,
        cfg.visibility.soft_width_px,
        radius,
    ))
}

/// Animated frames as 4D supervision. Depth targets are point-cloud renders
/// at the frame's pose.
pub fn video_set(
    exp: &Expansion,
    anim: &Animation,
    masks: &[Vec<RegionMask>],
    cfg: &ForgeConfig,
) -> Result<VideoSet> {
    let intr = cfg.camera.intrinsics()?;
    let views = anim
        .trajectories
        .iter()
        .zip(&anim.videos)
        .zip(masks)
        .map(|((traj, frames), masks)| {
            traj.poses
                .iter()
                .zip(frames)
                .zip(masks)
                .enumerate()
                .map(|(j, ((pose, image), mask))| {
                    let depth =
                        render_pointcloud(&exp.cloud, &intr, pose, cfg.expansion.splat_radius_px).1;
                    TrainView {
                        pose: *pose,
                        time: traj.time(j),
                        image: image.clone(),
                        depth,
                        mask: mask.clone(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(VideoSet { views })
}

/// Canonical supervision: point-cloud renders from the input camera and
/// every expansion pose.
pub fn canonical_supervision(exp: &Expansion, cfg: &ForgeConfig) -> Result<Vec<TrainView>> {
    let intr = cfg.camera.intrinsics()?;
    let poses: Vec<CameraPose> = std::iter::once(CameraPose::identity())
        .chain(exp.steps.iter().map(|s| s.pose))
        .collect();
    Ok(canonical_views(
        &exp.cloud,
        &poses,
        &intr,
        cfg.expansion.splat_radius_px,
    ))
}

pub fn fit_canonical(
    exp: &Expansion,
    canonical: &[TrainView],
    cfg: &ForgeConfig,
) -> Result<Vec<GaussianSplat>> {
    let intr = cfg.camera.intrinsics()?;
    train_canonical(&exp.cloud, canonical, &intr, &cfg.canonical)
}

pub fn fit_4d(
    splats: Vec<GaussianSplat>,
    videos: &VideoSet,
    canonical: &[TrainView],
    cfg: &ForgeConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Scene4D) -> Result<()>,
) -> Result<Scene4D> {
    let intr = cfg.camera.intrinsics()?;
    train_4d(splats, videos, canonical, &intr, &cfg.train, on_checkpoint)
}

/// Everything a full run produces.
pub struct RunOutput {
    pub expansion: Expansion,
    pub animation: Animation,
    pub masks: Vec<Vec<RegionMask>>,
    pub canonical: Vec<GaussianSplat>,
    pub scene: Scene4D,
}

/// All stages in sequence, without persistence.
pub fn run(input: &ImagePlane, cfg: &ForgeConfig, plugins: &Plugins) -> Result<RunOutput> {
    let expansion = expand(input, None, cfg, plugins)?;
    let animation = animate(&expansion, cfg, plugins)?;
    let masks = masks(&expansion, &animation, cfg)?;
    let videos = video_set(&expansion, &animation, &masks, cfg)?;
    let views = canonical_supervision(&expansion, cfg)?;
    let canonical = fit_canonical(&expansion, &views, cfg)?;
    let scene = fit_4d(canonical.clone(), &videos, &views, cfg, &mut |_, _| Ok(()))?;
    Ok(RunOutput {
        expansion,
        animation,
        masks,
        canonical,
        scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ForgeConfig {
        ForgeConfig::layered(
            None,
            &[
                "camera.width=20",
                "camera.height=16",
                "camera.focal=18.0",
                "expansion.steps=2",
                "animation.videos=2",
                "animation.frames=5",
                "synthetic.frames=5",
                "synthetic.diffusion_steps=6",
                "sampler.tau_tr=4",
                "sampler.tau_refine=2",
                "sampler.end_transition_n=2",
                "canonical.iterations=10",
                "canonical.max_splats=60",
                "train.iterations=8",
                "train.levels=[{spatial=4, temporal=3}]",
                "train.decoder_hidden=8",
            ]
            .map(String::from),
        )
        .unwrap()
    }

    #[test]
    fn tiny_run_produces_consistent_shapes() {
        let cfg = tiny();
        let (plugins, _) = connect_plugins(&cfg).unwrap();
        let input = synthetic_input(&cfg).unwrap();
        let out = run(&input, &cfg, &plugins).unwrap();
        assert_eq!(out.expansion.steps.len(), 2);
        assert_eq!(out.animation.videos.len(), 2);
        assert!(out.animation.videos.iter().all(|v| v.len() == 5));
        assert_eq!(out.masks.len(), 2);
        assert_eq!(out.scene.embeddings.len(), 2);
        assert_eq!(out.scene.splats.len(), out.canonical.len());
    }

    #[test]
    fn frame_count_mismatch_is_a_config_error() {
        let mut cfg = tiny();
        cfg.synthetic.frames = 7;
        assert!(matches!(connect_plugins(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn remote_without_socket_is_a_config_error() {
        let mut cfg = tiny();
        cfg.plugins.backend = PluginBackend::Remote;
        if std::env::var_os(PLUGIN_SOCKET_ENV).is_none() {
            assert!(matches!(connect_plugins(&cfg), Err(Error::Config(_))));
        }
    }
}
