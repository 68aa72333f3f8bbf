use super::{CameraIntrinsics, CameraPose, DepthMap, ImagePlane, PointCloud, RegionMask};
use crate::error::{Error, Result};

/// Lifts every valid depth pixel into the world frame.
pub fn unproject(
    image: &ImagePlane,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<PointCloud> {
    unproject_masked(image, depth, intr, pose, None, 0)
}

/// Like [`unproject`], restricted to pixels whose mask weight exceeds one
/// half. New points are tagged with `provenance`.
pub fn unproject_masked(
    image: &ImagePlane,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    mask: Option<&RegionMask>,
    provenance: u32,
) -> Result<PointCloud> {
    if !image.same_size(depth) || !image.same_size(intr) {
        return Err(Error::contract(format!(
            "unproject: image {}x{}, depth {}x{}, camera {}x{}",
            image.width, image.height, depth.width, depth.height, intr.width, intr.height
        )));
    }
    if let Some(m) = mask {
        if !image.same_size(m) {
            return Err(Error::contract("unproject: mask resolution mismatch"));
        }
    }
    let mut cloud = PointCloud::new();
    for y in 0..image.height {
        for x in 0..image.width {
            let i = y * image.width + x;
            if !depth.valid[i] || mask.is_some_and(|m| !m.contains(i)) {
                continue;
            }
            let d = depth.values[i];
            let p_cam = intr.ray(x as f64, y as f64) * d;
            cloud.push(pose.camera_to_world(&p_cam), image.rgb[i], provenance);
        }
    }
    Ok(cloud)
}

/// Nearest point per pixel: `(point index, camera depth)`.
#[derive(Clone, Debug)]
pub struct ZBuffer {
    pub width: usize,
    pub height: usize,
    pub entries: Vec<Option<(usize, f64)>>,
}

impl ZBuffer {
    pub fn covered(&self) -> RegionMask {
        RegionMask {
            width: self.width,
            height: self.height,
            weights: self
                .entries
                .iter()
                .map(|e| if e.is_some() { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Forward-warps points into a z-buffer. Each point covers the integer
/// pixels within `radius` of its projection, always including the pixel its
/// projection rounds to. Equal depths resolve to the lower point index.
pub fn zbuffer(
    positions: &[nalgebra::Vector3<f64>],
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    radius: f64,
) -> ZBuffer {
    let (w, h) = (intr.width, intr.height);
    let mut entries: Vec<Option<(usize, f64)>> = vec![None; w * h];
    let r = radius.max(0.0);
    let r2 = r * r;
    let mut write = |x: i64, y: i64, idx: usize, z: f64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return;
        }
        let slot = &mut entries[y as usize * w + x as usize];
        match slot {
            Some((j, zj)) if *zj < z || (*zj == z && *j < idx) => {}
            _ => *slot = Some((idx, z)),
        }
    };
    for (idx, p) in positions.iter().enumerate() {
        let pc = pose.world_to_camera(p);
        let Some((u, v)) = intr.project(&pc) else {
            continue;
        };
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (ru, rv) = (u.round(), v.round());
        write(ru as i64, rv as i64, idx, pc.z);
        if r > 0.0 {
            let (x0, x1) = ((u - r).ceil() as i64, (u + r).floor() as i64);
            let (y0, y1) = ((v - r).ceil() as i64, (v + r).floor() as i64);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 - u, y as f64 - v);
                    if dx * dx + dy * dy <= r2 && !(x == ru as i64 && y == rv as i64) {
                        write(x, y, idx, pc.z);
                    }
                }
            }
        }
    }
    ZBuffer {
        width: w,
        height: h,
        entries,
    }
}

/// Z-buffered render of a point cloud. The returned mask is 1 exactly where
/// some point landed; depth validity matches the mask.
pub fn render_pointcloud(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    splat_radius_px: f64,
) -> (ImagePlane, DepthMap, RegionMask) {
    let zb = zbuffer(&cloud.positions, intr, pose, splat_radius_px);
    let mut image = ImagePlane::new(intr.width, intr.height);
    let mut depth = DepthMap::invalid(intr.width, intr.height);
    for (i, e) in zb.entries.iter().enumerate() {
        if let Some((idx, z)) = e {
            image.rgb[i] = cloud.colors[*idx];
            depth.values[i] = *z;
            depth.valid[i] = true;
        }
    }
    (image, depth, zb.covered())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn unit_camera(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap()
    }

    #[test]
    fn unproject_origin_pixel() {
        let intr = unit_camera(1, 1);
        let img = ImagePlane::filled(1, 1, [0.1, 0.2, 0.3]);
        let depth = DepthMap::from_values(1, 1, vec![1.0]);
        let cloud = unproject(&img, &depth, &intr, &CameraPose::identity()).unwrap();
        assert_eq!(cloud.positions, vec![Vector3::new(0.0, 0.0, 1.0)]);
        assert_eq!(cloud.colors, vec![[0.1, 0.2, 0.3]]);
    }

    #[test]
    fn unproject_hand_computed_pixel() {
        // pixel (2,1), depth 2, fx=fy=2, cx=cy=1 -> ((2-1)/2*2, (1-1)/2*2, 2) = (1, 0, 2)
        let intr = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0, 3, 2).unwrap();
        let img = ImagePlane::new(3, 2);
        let mut depth = DepthMap::invalid(3, 2);
        depth.set(2, 1, 2.0);
        let cloud = unproject(&img, &depth, &intr, &CameraPose::identity()).unwrap();
        assert_eq!(cloud.positions, vec![Vector3::new(1.0, 0.0, 2.0)]);
    }

    #[test]
    fn unproject_all_invalid_is_empty() {
        let intr = unit_camera(4, 3);
        let cloud = unproject(
            &ImagePlane::new(4, 3),
            &DepthMap::invalid(4, 3),
            &intr,
            &CameraPose::identity(),
        )
        .unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn unproject_rejects_resolution_mismatch() {
        let intr = unit_camera(4, 3);
        let err = unproject(
            &ImagePlane::new(4, 3),
            &DepthMap::invalid(3, 3),
            &intr,
            &CameraPose::identity(),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn single_point_renders_disc_around_principal_point() {
        let intr = CameraIntrinsics::new(1.0, 1.0, 5.0, 5.0, 11, 11).unwrap();
        let mut cloud = PointCloud::new();
        cloud.push(Vector3::new(0.0, 0.0, 1.0), [1.0, 1.0, 1.0], 0);
        for radius in [0.0, 1.0, 2.5] {
            let (_, depth, mask) =
                render_pointcloud(&cloud, &intr, &CameraPose::identity(), radius);
            for y in 0..11 {
                for x in 0..11 {
                    let d2 = (x as f64 - 5.0).powi(2) + (y as f64 - 5.0).powi(2);
                    let inside = d2 <= radius * radius;
                    assert_eq!(mask.get(x, y) == 1.0, inside, "r={radius} ({x},{y})");
                    assert_eq!(depth.get(x, y), inside.then_some(1.0));
                }
            }
        }
    }

    #[test]
    fn points_behind_camera_are_culled() {
        let intr = CameraIntrinsics::new(1.0, 1.0, 2.0, 2.0, 5, 5).unwrap();
        let mut cloud = PointCloud::new();
        cloud.push(Vector3::new(0.0, 0.0, -1.0), [1.0, 0.0, 0.0], 0);
        let (_, _, mask) = render_pointcloud(&cloud, &intr, &CameraPose::identity(), 1.0);
        assert_eq!(mask.support(), 0);
    }

    #[test]
    fn empty_cloud_gives_zero_mask() {
        let intr = unit_camera(3, 3);
        let (_, depth, mask) =
            render_pointcloud(&PointCloud::new(), &intr, &CameraPose::identity(), 1.0);
        assert_eq!(mask.support(), 0);
        assert_eq!(depth.valid_count(), 0);
    }

    #[test]
    fn depth_ties_break_to_lower_index() {
        let intr = CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 3, 3).unwrap();
        let mut cloud = PointCloud::new();
        cloud.push(Vector3::new(0.0, 0.0, 2.0), [1.0, 0.0, 0.0], 0);
        cloud.push(Vector3::new(0.0, 0.0, 2.0), [0.0, 1.0, 0.0], 0);
        let (img, _, _) = render_pointcloud(&cloud, &intr, &CameraPose::identity(), 0.0);
        assert_eq!(img.get(1, 1), [1.0, 0.0, 0.0]);
    }

    fn textured(w: usize, h: usize, seed: u64) -> (ImagePlane, DepthMap) {
        let img = ImagePlane::from_fn(w, h, |x, y| {
            let s = ((x * 7 + y * 13) as u64 ^ seed) % 97;
            [
                s as f64 / 96.0,
                (x as f64) / w as f64,
                (y as f64) / h as f64,
            ]
        });
        let depth = DepthMap::from_values(
            w,
            h,
            (0..w * h)
                .map(|i| 1.0 + ((i as u64 * 31 + seed) % 17) as f64 / 8.0)
                .collect(),
        );
        (img, depth)
    }

    proptest! {
        #[test]
        fn render_unproject_round_trip(w in 1usize..12, h in 1usize..12, f in 0.5f64..40.0, seed in 0u64..1000) {
            let intr = CameraIntrinsics::centered(f, w, h).unwrap();
            let (img, depth) = textured(w, h, seed);
            let cloud = unproject(&img, &depth, &intr, &CameraPose::identity()).unwrap();
            let (img2, depth2, mask) = render_pointcloud(&cloud, &intr, &CameraPose::identity(), 0.0);
            prop_assert_eq!(mask.support(), w * h);
            prop_assert_eq!(img2, img);
            prop_assert_eq!(depth2, depth);
        }

        #[test]
        fn projection_invariant_under_scene_scaling(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..5.0,
            tx in -1.0f64..1.0, ty in -1.0f64..1.0, tz in -0.4f64..0.4,
            angle in -0.3f64..0.3, s in 0.1f64..10.0,
        ) {
            let intr = CameraIntrinsics::centered(50.0, 64, 64).unwrap();
            let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle);
            let p = Vector3::new(x, y, z);
            let t = Vector3::new(tx, ty, tz);
            let a = CameraPose::new(rot, t);
            let b = CameraPose::new(rot, t * s);
            let pa = intr.project(&a.world_to_camera(&p));
            let pb = intr.project(&b.world_to_camera(&(p * s)));
            match (pa, pb) {
                (Some((ua, va)), Some((ub, vb))) => {
                    prop_assert!((ua - ub).abs() < 1e-9 && (va - vb).abs() < 1e-9);
                }
                (None, None) => {}
                _ => prop_assert!(false, "visibility changed under scaling"),
            }
        }

        #[test]
        fn adding_points_never_shrinks_mask(n in 1usize..30, extra in 1usize..30, seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let intr = CameraIntrinsics::centered(10.0, 16, 16).unwrap();
            let mut cloud = PointCloud::new();
            for _ in 0..n {
                cloud.push(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..3.0)), [0.5; 3], 0);
            }
            let (_, _, before) = render_pointcloud(&cloud, &intr, &CameraPose::identity(), 1.0);
            for _ in 0..extra {
                cloud.push(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..3.0)), [0.5; 3], 1);
            }
            let (_, _, after) = render_pointcloud(&cloud, &intr, &CameraPose::identity(), 1.0);
            for (b, a) in before.weights.iter().zip(&after.weights) {
                prop_assert!(a >= b);
            }
        }
    }
}
