//! Which video supervises which part of the scene. Each canonical point goes
//! to the video that sees it closest and most head-on; per-frame masks then
//! follow from rasterizing the owners, with a linear crossfade at borders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{zbuffer, CameraIntrinsics, DepthMap, PointCloud, RegionMask};
use crate::trajectory::Trajectory;

/// Occlusion tolerance as a fraction of the ray length.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

/// Per-point averages over the frames of one video that see the point.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewStats {
    /// Mean camera-to-point distance; `None` if no frame sees the point.
    pub ray_length: Vec<Option<f64>>,
    /// Mean cosine between the viewing ray and the optical axis.
    pub angle_score: Vec<Option<f64>>,
}

impl ViewStats {
    pub fn score(&self, i: usize, beta: f64) -> Option<f64> {
        Some(1.0 / self.ray_length[i]? + beta * self.angle_score[i]?)
    }
}

/// Visibility statistics of every point along one trajectory. A point counts
/// as seen in a frame when it projects into the image and its depth agrees
/// with `depths[j]` within 1% of its ray length.
pub fn view_stats(
    cloud: &PointCloud,
    traj: &Trajectory,
    intr: &CameraIntrinsics,
    depths: &[DepthMap],
) -> ViewStats {
    assert_eq!(depths.len(), traj.len(), "one depth map per frame");
    let n = cloud.len();
    let mut len_sum = vec![0.0; n];
    let mut ang_sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (pose, depth) in traj.poses.iter().zip(depths) {
        for (i, p) in cloud.positions.iter().enumerate() {
            let pc = pose.world_to_camera(p);
            let Some((u, v)) = intr.project(&pc) else {
                continue;
            };
            let (x, y) = (u.round(), v.round());
            if x < 0.0 || y < 0.0 || x >= intr.width as f64 || y >= intr.height as f64 {
                continue;
            }
            let Some(d) = depth.get(x as usize, y as usize) else {
                continue;
            };
            let len = pc.norm();
            if (pc.z - d).abs() > OCCLUSION_TOLERANCE * len {
                continue;
            }
            len_sum[i] += len;
            ang_sum[i] += pc.z / len;
            count[i] += 1;
        }
    }
    let avg = |s: &[f64]| {
        s.iter()
            .zip(&count)
            .map(|(v, c)| (*c > 0).then(|| v / *c as f64))
            .collect()
    };
    ViewStats {
        ray_length: avg(&len_sum),
        angle_score: avg(&ang_sum),
    }
}

/// [`view_stats`] against depth rendered from the cloud itself.
pub fn view_stats_rendered(
    cloud: &PointCloud,
    traj: &Trajectory,
    intr: &CameraIntrinsics,
    splat_radius_px: f64,
) -> ViewStats {
    let depths: Vec<DepthMap> = traj
        .poses
        .iter()
        .map(|p| crate::geometry::render_pointcloud(cloud, intr, p, splat_radius_px).1)
        .collect();
    view_stats(cloud, traj, intr, &depths)
}

/// Owner video of every point and its per-video weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePartAssignment {
    pub owner: Vec<Option<usize>>,
    /// `weights[i][k]`: share of point `i` supervised by video `k`. One-hot on
    /// the owner; all zero for unseen points.
    pub weights: Vec<Vec<f64>>,
}

/// Picks, per point, the video maximizing `1/‖r‖ + β·cosθ`; ties go to the
/// lower video index, points no video sees get no owner.
pub fn assign_owners(stats: &[ViewStats], beta: f64) -> ScenePartAssignment {
    let n = stats.first().map_or(0, |s| s.ray_length.len());
    let videos = stats.len();
    let mut owner = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (k, s) in stats.iter().enumerate() {
            if let Some(score) = s.score(i, beta) {
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((k, score));
                }
            }
        }
        let mut w = vec![0.0; videos];
        if let Some((k, _)) = best {
            w[k] = 1.0;
        }
        owner.push(best.map(|(k, _)| k));
        weights.push(w);
    }
    ScenePartAssignment { owner, weights }
}

/// Owner of the point that wins each pixel of a z-buffered render.
pub fn ownership_map(
    cloud: &PointCloud,
    assign: &ScenePartAssignment,
    intr: &CameraIntrinsics,
    pose: &crate::geometry::CameraPose,
    splat_radius_px: f64,
) -> Vec<Option<usize>> {
    zbuffer(&cloud.positions, intr, pose, splat_radius_px)
        .entries
        .iter()
        .map(|e| e.and_then(|(idx, _)| assign.owner[idx]))
        .collect()
}

/// Soft per-video weights of one frame from its ownership map.
///
/// A non-owner video `k` whose nearest owned pixel lies at distance `d ≤ W`
/// gets `(W + 1 − d) / (2(W + 1))`. If those shares sum above 1/2 they are
/// scaled down to 1/2. The owner takes the rest, so covered pixels sum to 1
/// and unowned pixels are 0 everywhere. `W = 0` is a hard partition.
pub fn soft_weights(
    owners: &[Option<usize>],
    width: usize,
    height: usize,
    videos: usize,
    soft_width_px: f64,
) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; owners.len()]; videos];
    let w = soft_width_px.max(0.0);
    let reach = w.floor() as i64;
    let mut nearest = vec![f64::INFINITY; videos];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let p = (y * width as i64 + x) as usize;
            let Some(own) = owners[p] else {
                continue;
            };
            nearest.iter_mut().for_each(|d| *d = f64::INFINITY);
            for yy in (y - reach).max(0)..=(y + reach).min(height as i64 - 1) {
                for xx in (x - reach).max(0)..=(x + reach).min(width as i64 - 1) {
                    if let Some(k) = owners[(yy * width as i64 + xx) as usize] {
                        if k != own {
                            let d = (((xx - x).pow(2) + (yy - y).pow(2)) as f64).sqrt();
                            if d < nearest[k] {
                                nearest[k] = d;
                            }
                        }
                    }
                }
            }
            let mut total = 0.0;
            for k in 0..videos {
                if k != own && nearest[k] <= w {
                    let share = (w + 1.0 - nearest[k]) / (2.0 * (w + 1.0));
                    out[k][p] = share;
                    total += share;
                }
            }
            if total > 0.5 {
                let s = 0.5 / total;
                for k in 0..videos {
                    out[k][p] *= s;
                }
                total = 0.5;
            }
            out[own][p] = 1.0 - total;
        }
    }
    out
}

/// Per-video, per-frame supervision masks.
pub fn build_masks(
    assign: &ScenePartAssignment,
    cloud: &PointCloud,
    trajs: &[Trajectory],
    intr: &CameraIntrinsics,
    soft_width_px: f64,
    splat_radius_px: f64,
) -> Vec<Vec<RegionMask>> {
    let videos = trajs.len();
    trajs
        .par_iter()
        .enumerate()
        .map(|(k, traj)| {
            traj.poses
                .iter()
                .map(|pose| {
                    let owners = ownership_map(cloud, assign, intr, pose, splat_radius_px);
                    let mut weights =
                        soft_weights(&owners, intr.width, intr.height, videos, soft_width_px);
                    RegionMask {
                        width: intr.width,
                        height: intr.height,
                        weights: std::mem::take(&mut weights[k]),
                    }
                })
                .collect()
        })
        .collect()
}

/// Points seen by at least one video.
pub fn covered_points(assign: &ScenePartAssignment) -> usize {
    assign.owner.iter().filter(|o| o.is_some()).count()
}
