//! Stage one: grow the point cloud by rendering it from new poses,
//! inpainting what is missing, blending seams, aligning the estimated depth of
//! the new content and merging it back.

mod align;
mod poisson;

pub use align::{
    align_depth, alignment_objective, apply_fit, fit_disparity, DisparityFit, MIN_SUPPORT,
};
pub use poisson::{
    laplacian, poisson_blend, poisson_blend_with, seam_jump, PoissonReport, PoissonSettings,
};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    render_pointcloud, unproject_masked, CameraIntrinsics, CameraPose, DepthMap, ImagePlane,
    PointCloud, RegionMask,
};
use crate::plugins::{InpaintRequest, Plugins, ViewHint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    pub prompt: String,
    pub splat_radius_px: f64,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            splat_radius_px: 1.0,
            seed: 0,
        }
    }
}

/// Record of one extrapolation iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionStep {
    pub pose: CameraPose,
    /// Pose of the previous iteration (the input camera for the first one);
    /// the extrapolation path runs from here to `pose`.
    pub source_pose: CameraPose,
    pub known_mask: RegionMask,
    pub blended_image: ImagePlane,
    pub aligned_depth: DepthMap,
    pub new_points: Range<usize>,
    pub fit: DisparityFit,
}

/// Appends the fill-region pixels (`fill_mask` > 1/2) as new points tagged
/// with `provenance`. Existing points are untouched.
pub fn merge(
    cloud: &PointCloud,
    image: &ImagePlane,
    depth: &DepthMap,
    fill_mask: &RegionMask,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    provenance: u32,
) -> Result<(PointCloud, Range<usize>)> {
    let fresh = unproject_masked(image, depth, intr, pose, Some(fill_mask), provenance)?;
    let mut out = cloud.clone();
    let range = out.append(fresh);
    Ok((out, range))
}

/// The starting cloud: the input image lifted with estimated depth.
pub fn initial_cloud(
    image: &ImagePlane,
    intr: &CameraIntrinsics,
    plugins: &Plugins,
) -> Result<PointCloud> {
    let view = ViewHint {
        intrinsics: *intr,
        pose: CameraPose::identity(),
    };
    let depth = plugins
        .depth
        .estimate(image, Some(&view))
        .map_err(|e| e.in_stage("initial depth"))?;
    crate::geometry::unproject(image, &depth, intr, &CameraPose::identity())
}

/// Runs one render → inpaint → blend → estimate → align → merge iteration per
/// planned pose. Iteration `i` (1-based) tags its points with provenance `i`.
pub fn expand_scene(
    init: &PointCloud,
    plan: &[CameraPose],
    intr: &CameraIntrinsics,
    plugins: &Plugins,
    cfg: &ExpansionConfig,
) -> Result<(PointCloud, Vec<ExpansionStep>)> {
    let mut cloud = init.clone();
    let mut steps = Vec::with_capacity(plan.len());
    let mut source = CameraPose::identity();
    let base = init.provenance.iter().copied().max().unwrap_or(0);
    for (i, pose) in plan.iter().enumerate() {
        let iteration = i + 1;
        let (rendered, rendered_depth, known) =
            render_pointcloud(&cloud, intr, pose, cfg.splat_radius_px);
        if known.support() == 0 {
            return Err(Error::DisconnectedView { step: iteration });
        }
        let fill = known.complement();
        let view = ViewHint {
            intrinsics: *intr,
            pose: *pose,
        };
        let request = InpaintRequest {
            image: rendered.clone(),
            inpaint_mask: fill.clone(),
            prompt: cfg.prompt.clone(),
            view: Some(view),
        };
        let inpainted = plugins
            .inpainter
            .fill(&request, cfg.seed.wrapping_add(iteration as u64))
            .map_err(|e| e.in_stage("inpaint"))?;
        let blended = poisson_blend(&inpainted, &rendered, &known)?;
        let estimated = plugins
            .depth
            .estimate(&blended, Some(&view))
            .map_err(|e| e.in_stage("depth estimation"))?;
        let (aligned, fit) = align_depth(&estimated, &rendered_depth, &known)?;
        let (merged, range) = merge(
            &cloud,
            &blended,
            &aligned,
            &fill,
            intr,
            pose,
            base + iteration as u32,
        )?;
        log::info!(
            "expansion {iteration}: {} known px, {} new points, alignment {:.3e} -> {:.3e}",
            known.support(),
            range.len(),
            fit.objective_before,
            fit.objective_after
        );
        cloud = merged;
        steps.push(ExpansionStep {
            pose: *pose,
            source_pose: source,
            known_mask: known,
            blended_image: blended,
            aligned_depth: aligned,
            new_points: range,
            fit,
        });
        source = *pose;
    }
    Ok((cloud, steps))
}

/// Camera poses sweeping outward from the input view: yaw alternates left
/// and right with growing magnitude, with a slight sideways slide.
pub fn orbit_plan(count: usize, max_yaw: f64) -> Vec<CameraPose> {
    (1..=count)
        .map(|i| {
            let ring = i.div_ceil(2) as f64;
            let rings = count.div_ceil(2).max(1) as f64;
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            let yaw = sign * max_yaw * ring / rings;
            let center = nalgebra::Vector3::new(sign * 0.15 * ring / rings, 0.0, 0.0);
            CameraPose::look_from(center, yaw, 0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plugins::synthetic::SyntheticSettings;
    use crate::world::SyntheticWorld;

    fn setup(
        settings: SyntheticSettings,
    ) -> (SyntheticWorld, Plugins, CameraIntrinsics, PointCloud) {
        let world = SyntheticWorld::default();
        let plugins = Plugins::synthetic(world.clone(), &settings);
        let intr = CameraIntrinsics::centered(56.0, 48, 48).unwrap();
        let (img, _) = world.render_static(&intr, &CameraPose::identity());
        let cloud = initial_cloud(&img, &intr, &plugins).unwrap();
        (world, plugins, intr, cloud)
    }

    #[test]
    fn merge_edge_cases() {
        let intr = CameraIntrinsics::centered(10.0, 6, 5).unwrap();
        let img = ImagePlane::filled(6, 5, [0.3; 3]);
        let depth = DepthMap::from_values(6, 5, vec![2.0; 30]);
        let base = PointCloud::new();
        let pose = CameraPose::identity();
        let (same, r) = merge(
            &base,
            &img,
            &depth,
            &RegionMask::zeros(6, 5),
            &intr,
            &pose,
            1,
        )
        .unwrap();
        assert_eq!(same, base);
        assert!(r.is_empty());
        let (full, r) = merge(
            &base,
            &img,
            &depth,
            &RegionMask::ones(6, 5),
            &intr,
            &pose,
            1,
        )
        .unwrap();
        assert_eq!(full.len(), 30);
        assert_eq!(r, 0..30);
        let (rendered, _, _) = render_pointcloud(&full, &intr, &pose, 0.0);
        assert_eq!(rendered, img);
    }

    #[test]
    fn zero_iterations_return_the_input() {
        let (_, plugins, intr, cloud) = setup(SyntheticSettings::default());
        let (out, steps) =
            expand_scene(&cloud, &[], &intr, &plugins, &ExpansionConfig::default()).unwrap();
        assert_eq!(out, cloud);
        assert!(steps.is_empty());
    }

    #[test]
    fn disconnected_pose_is_an_error() {
        let (_, plugins, intr, cloud) = setup(SyntheticSettings::default());
        let away = CameraPose::look_from(nalgebra::Vector3::zeros(), std::f64::consts::PI, 0.0);
        let err = expand_scene(
            &cloud,
            &[away],
            &intr,
            &plugins,
            &ExpansionConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DisconnectedView { step: 1 }));
    }

    #[test]
    fn three_iterations_track_the_world() {
        let settings = SyntheticSettings {
            disparity_warp: [1.5, 0.05],
            inpaint_color_shift: [0.05, -0.03, 0.02],
            ..Default::default()
        };
        let (world, plugins, intr, _) = setup(settings);
        // Start from exact geometry so the renders can be compared with the world.
        let (img, depth) = world.render_static(&intr, &CameraPose::identity());
        let cloud =
            crate::geometry::unproject(&img, &depth, &intr, &CameraPose::identity()).unwrap();
        let plan = orbit_plan(3, 0.3);
        let (out, steps) =
            expand_scene(&cloud, &plan, &intr, &plugins, &ExpansionConfig::default()).unwrap();
        assert_eq!(steps.len(), 3);
        let mut last = 0;
        for (i, s) in steps.iter().enumerate() {
            assert!(!s.new_points.is_empty());
            assert!(s.new_points.start >= last);
            last = s.new_points.end;
            assert!(out.provenance[s.new_points.clone()]
                .iter()
                .all(|p| *p == i as u32 + 1));
            let (a, b) = s.fit.warp();
            assert!(
                (a - 1.5).abs() < 5e-2 && (b - 0.05).abs() < 2e-2,
                "{:?}",
                s.fit
            );
            assert!(s.fit.objective_after < s.fit.objective_before);
        }
        assert!(out.provenance.windows(2).all(|w| w[0] <= w[1]));
        for pose in plan.iter().chain([CameraPose::identity()].iter()) {
            let (img, _, mask) = render_pointcloud(&out, &intr, pose, 1.0);
            let (truth, _) = world.render_static(&intr, pose);
            let psnr = img.psnr(&truth, Some(&mask));
            assert!(psnr > 35.0, "psnr {psnr}");
        }
    }

    #[test]
    fn coverage_is_monotone() {
        let (_, plugins, intr, cloud) = setup(SyntheticSettings::default());
        let plan = orbit_plan(4, 0.35);
        let probe = CameraPose::look_from(nalgebra::Vector3::zeros(), -0.45, 0.0);
        let mut current = cloud;
        let mut prev = render_pointcloud(&current, &intr, &probe, 1.0).2.support();
        for pose in &plan {
            let (next, _) = expand_scene(
                &current,
                std::slice::from_ref(pose),
                &intr,
                &plugins,
                &ExpansionConfig::default(),
            )
            .unwrap();
            current = next;
            let now = render_pointcloud(&current, &intr, &probe, 1.0).2.support();
            assert!(now >= prev);
            prev = now;
        }
    }
}
