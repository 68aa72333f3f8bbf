//! Per-video camera paths built from the expansion steps.

use std::collections::BTreeSet;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpansionStep;
use crate::geometry::{zbuffer, CameraIntrinsics, CameraPose, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
    /// Index of the expansion step whose path this follows.
    pub source_step: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn start(&self) -> &CameraPose {
        &self.poses[0]
    }

    pub fn end(&self) -> &CameraPose {
        self.poses.last().expect("trajectory is never empty")
    }

    /// Normalized timestamp of frame `j`.
    pub fn time(&self, j: usize) -> f64 {
        frame_time(j, self.poses.len())
    }
}

/// `t_j = j / (T − 1)`.
pub fn frame_time(j: usize, frames: usize) -> f64 {
    if frames < 2 {
        0.0
    } else {
        j as f64 / (frames - 1) as f64
    }
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 1.0 - 1e-12 {
        qa * (1.0 - t) + qb * t
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - t) * theta).sin() / s) + qb * ((t * theta).sin() / s)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
}

/// `frames` poses from `a` to `b`: slerped rotation, linearly interpolated
/// translation, uniform parameters. The endpoints are copied exactly.
pub fn interpolate_poses(a: &CameraPose, b: &CameraPose, frames: usize) -> Result<Trajectory> {
    if frames < 2 {
        return Err(Error::contract(format!(
            "trajectory needs at least 2 frames, got {frames}"
        )));
    }
    let poses = (0..frames)
        .map(|j| {
            if j == 0 {
                return *a;
            }
            if j == frames - 1 {
                return *b;
            }
            let t = frame_time(j, frames);
            CameraPose::new(
                slerp(&a.rotation, &b.rotation, t),
                a.translation * (1.0 - t) + b.translation * t,
            )
        })
        .collect();
    Ok(Trajectory {
        poses,
        source_step: 0,
    })
}

/// Ids of the points that win at least one pixel when the cloud is rendered
/// from `pose`.
pub fn visible_points(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    radius: f64,
) -> BTreeSet<usize> {
    zbuffer(&cloud.positions, intr, pose, radius)
        .entries
        .iter()
        .flatten()
        .map(|(idx, _)| *idx)
        .collect()
}

/// Greedy maximum coverage: repeatedly takes the set adding the most uncovered
/// elements, ties to the lower index. Returns chosen indices in pick order.
pub fn greedy_cover(sets: &[BTreeSet<usize>], k: usize) -> Vec<usize> {
    let mut covered = BTreeSet::new();
    let mut chosen = Vec::new();
    let mut used = vec![false; sets.len()];
    for _ in 0..k.min(sets.len()) {
        let mut best: Option<(usize, usize)> = None;
        for (i, s) in sets.iter().enumerate() {
            if used[i] {
                continue;
            }
            let gain = s.difference(&covered).count();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let (i, _) = best.expect("unused set remains");
        used[i] = true;
        covered.extend(sets[i].iter().copied());
        chosen.push(i);
    }
    chosen
}

/// One trajectory per selected expansion step, from its source pose to its
/// pose. With fewer than `k` steps all are used; otherwise the `k` steps are
/// chosen greedily to cover the most points of `cloud`. Output follows step
/// order.
pub fn plan_videos(
    steps: &[ExpansionStep],
    k: usize,
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    frames: usize,
    splat_radius_px: f64,
) -> Result<Vec<Trajectory>> {
    if k == 0 {
        return Err(Error::contract("at least one video is required"));
    }
    let mut selected: Vec<usize> = if k >= steps.len() {
        (0..steps.len()).collect()
    } else {
        let sets: Vec<_> = steps
            .iter()
            .map(|s| visible_points(cloud, intr, &s.pose, splat_radius_px))
            .collect();
        greedy_cover(&sets, k)
    };
    selected.sort_unstable();
    selected
        .into_iter()
        .map(|i| {
            let mut traj = interpolate_poses(&steps[i].source_pose, &steps[i].pose, frames)?;
            traj.source_step = i;
            Ok(traj)
        })
        .collect()
}
