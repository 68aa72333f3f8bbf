//! Random problem instances shared by the suites.

use forge_core::gaussian::{
    knn_graph, GaussianSplat, HexPlaneLevel, LossWeights, NeighborGraph, Scene4D, TrainView,
};
use forge_core::geometry::{CameraIntrinsics, CameraPose, DepthMap, ImagePlane, RegionMask};
use nalgebra::Vector3;
use rand::Rng;

pub fn random_pose(rng: &mut impl Rng) -> CameraPose {
    let center = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    CameraPose::look_from(
        center,
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
    )
}

/// A splat whose center projects near pixel `(u, v)` at camera depth `z`.
pub fn splat_at(
    rng: &mut impl Rng,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    u: f64,
    v: f64,
    z: f64,
) -> GaussianSplat {
    let cam = intr.ray(u, v) * z;
    let mut sh = [0.0; 48];
    for c in &mut sh {
        *c = rng.random_range(-0.4..0.4);
    }
    GaussianSplat {
        position: pose.camera_to_world(&cam),
        rotation: [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ],
        log_scale: Vector3::new(
            rng.random_range(-3.5..-1.0),
            rng.random_range(-3.5..-1.0),
            rng.random_range(-3.5..-1.0),
        ) + Vector3::repeat(z.abs().max(0.1).ln()),
        opacity_logit: rng.random_range(-3.0..3.0),
        sh,
    }
}

/// Up to `max_splats` splats, some behind the camera or off screen.
pub struct RenderCase {
    pub splats: Vec<GaussianSplat>,
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
    pub sh_degree: usize,
}

pub fn render_case(rng: &mut impl Rng, max_splats: usize) -> RenderCase {
    let w = rng.random_range(12..40);
    let h = rng.random_range(10..32);
    let intr = CameraIntrinsics::centered(rng.random_range(10.0..40.0), w, h).unwrap();
    let pose = random_pose(rng);
    let n = rng.random_range(0..=max_splats);
    let splats = (0..n)
        .map(|_| {
            let u = rng.random_range(-6.0..w as f64 + 6.0);
            let v = rng.random_range(-6.0..h as f64 + 6.0);
            let z = rng.random_range(-0.5..6.0);
            splat_at(rng, &intr, &pose, u, v, z)
        })
        .collect();
    RenderCase {
        splats,
        intr,
        pose,
        sh_degree: rng.random_range(0..=3),
    }
}

/// A small 4D scene with every parameter group randomized, plus one
/// supervised frame.
pub struct GradientCase {
    pub scene: Scene4D,
    pub intr: CameraIntrinsics,
    pub view: TrainView,
    pub video: Option<usize>,
    pub weights: LossWeights,
    pub graph: NeighborGraph,
}

pub fn gradient_case(rng: &mut impl Rng) -> GradientCase {
    let (w, h) = (16, 12);
    let intr = CameraIntrinsics::centered(14.0, w, h).unwrap();
    let pose = random_pose(rng);
    let n = rng.random_range(3..=10);
    let splats: Vec<GaussianSplat> = (0..n)
        .map(|_| {
            let u = rng.random_range(2.0..w as f64 - 2.0);
            let v = rng.random_range(2.0..h as f64 - 2.0);
            let z = rng.random_range(1.5..4.0);
            let mut s = splat_at(rng, &intr, &pose, u, v, z);
            s.log_scale += Vector3::repeat(1.0);
            s
        })
        .collect();
    let videos = rng.random_range(1..=3);
    let levels = vec![
        HexPlaneLevel {
            spatial: 4,
            temporal: 3,
        },
        HexPlaneLevel {
            spatial: 5,
            temporal: 4,
        },
    ];
    let mut scene = Scene4D::new(splats.clone(), videos, levels, 3, 4, 8, rng.random());
    scene.sh_degree = rng.random_range(0..=3);
    for v in &mut scene.field.data {
        *v = rng.random_range(0.5..1.5);
    }
    let heads = scene.decoder.head_range();
    for (i, v) in scene.decoder.params.iter_mut().enumerate() {
        let s = if heads.contains(&i) { 0.05 } else { 0.6 };
        *v = rng.random_range(-s..s);
    }
    for e in &mut scene.embeddings {
        for v in e.iter_mut() {
            let m: f64 = rng.random_range(0.05..0.5);
            *v = if rng.random_bool(0.5) { m } else { -m };
        }
    }
    let image = ImagePlane::from_fn(w, h, |_, _| {
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]
    });
    let mut depth = DepthMap::invalid(w, h);
    for i in 0..w * h {
        if rng.random_bool(0.8) {
            depth.values[i] = rng.random_range(1.0..5.0);
            depth.valid[i] = true;
        }
    }
    let mask = RegionMask::from_fn(w, h, |_, _| {
        if rng.random_bool(0.2) {
            0.0
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let positions: Vec<Vector3<f64>> = splats.iter().map(|s| s.position).collect();
    GradientCase {
        video: rng.random_bool(0.8).then(|| rng.random_range(0..videos)),
        view: TrainView {
            pose,
            time: rng.random_range(0.05..0.95),
            image,
            depth,
            mask,
        },
        weights: LossWeights {
            depth: rng.random_range(0.5..2.0),
            rigidity: rng.random_range(0.5..2.0),
            embedding: 1e-2,
        },
        graph: knn_graph(&positions, 3),
        scene,
        intr,
    }
}
