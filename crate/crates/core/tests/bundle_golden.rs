//! The checked-in version 1 bundle must keep decoding to the same values.
//! Regenerate with `FORGE_BLESS_GOLDEN=1 cargo test -p forge-core --test bundle_golden`.

use std::path::PathBuf;

use forge_core::bundle::{self, Fingerprints, SceneBundle};
use forge_core::config::ForgeConfig;
use forge_core::expansion::{DisparityFit, ExpansionStep};
use forge_core::gaussian::{GaussianSplat, HexPlaneLevel, Scene4D};
use forge_core::geometry::{CameraPose, DepthMap, ImagePlane, PointCloud, RegionMask};
use forge_core::pipeline::{Animation, Expansion};
use forge_core::trajectory::Trajectory;
use nalgebra::Vector3;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_v1")
}

/// Every value is exact in `f32` and in 8 bits, so decoding reproduces it.
fn golden() -> SceneBundle {
    let (w, h) = (4, 3);
    let byte = |k: usize| (k % 256) as f64 / 255.0;
    let image = |seed: usize| {
        ImagePlane::from_fn(w, h, |x, y| {
            let k = seed * 37 + (y * w + x) * 11;
            [byte(k), byte(k + 85), byte(k + 170)]
        })
    };
    let mask = |seed: usize| RegionMask::from_fn(w, h, |x, y| byte(seed * 51 + (x + y) * 40));
    let pose = CameraPose::look_from(Vector3::new(0.125, 0.0, -0.25), 0.25, -0.125);

    let mut cloud = PointCloud::new();
    for i in 0..5 {
        let f = i as f64;
        cloud.push(
            Vector3::new(0.25 * f, -0.5 + 0.125 * f, 2.0 + 0.0625 * f),
            [0.25, 0.5 + 0.0625 * f, 1.0 - 0.125 * f],
            u32::from(i >= 3),
        );
    }
    let depth = DepthMap::from_values(w, h, (0..w * h).map(|i| 1.5 + 0.25 * i as f64).collect());
    let step = ExpansionStep {
        pose,
        source_pose: CameraPose::identity(),
        known_mask: mask(1),
        blended_image: image(2),
        aligned_depth: depth,
        new_points: 3..5,
        fit: DisparityFit {
            scale: 1.25,
            shift: -0.0625,
            objective_before: 0.5,
            objective_after: 1e-9,
            iterations: 4,
        },
    };

    let splat = |i: usize| {
        let f = i as f64;
        let mut sh = [0.0; 48];
        for (c, v) in sh.iter_mut().enumerate() {
            *v = (c as f64 - 24.0) / 64.0 + f / 8.0;
        }
        GaussianSplat {
            position: Vector3::new(f / 4.0, -f / 8.0, 2.0 + f / 16.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::new(-2.0, -2.5, -3.0 + f / 4.0),
            opacity_logit: 0.5 - f,
            sh,
        }
    };
    let canonical = vec![splat(0), splat(1)];
    let mut scene = Scene4D::new(
        canonical.clone(),
        2,
        vec![HexPlaneLevel {
            spatial: 2,
            temporal: 2,
        }],
        2,
        3,
        2,
        0,
    );
    for (i, v) in scene.field.data.iter_mut().enumerate() {
        *v = 0.5 + (i % 8) as f64 / 16.0;
    }
    scene.field.bounds_min = [-1.0, -1.0, 1.0];
    scene.field.bounds_max = [1.0, 1.0, 3.0];
    for (i, v) in scene.decoder.params.iter_mut().enumerate() {
        *v = ((i % 9) as f64 - 4.0) / 32.0;
    }
    scene.embeddings = vec![vec![0.25, -0.125, 0.0], vec![-0.25, 0.125, 0.5]];
    scene.sh_degree = 1;

    let mut cfg = ForgeConfig::default();
    cfg.camera.width = w;
    cfg.camera.height = h;
    cfg.camera.focal = 4.0;
    let input = image(0);
    let fingerprints = Fingerprints::compute(&cfg, &input, None);
    SceneBundle {
        fingerprints,
        expansion: Some(Expansion {
            input,
            cloud,
            steps: vec![step],
        }),
        animation: Some(Animation {
            trajectories: vec![Trajectory {
                poses: vec![CameraPose::identity(), pose],
                source_step: 0,
            }],
            videos: vec![vec![image(3), image(4)]],
        }),
        masks: Some(vec![vec![mask(5), mask(6)]]),
        canonical: Some(canonical),
        checkpoint: None,
        scene: Some(scene),
        config: cfg,
    }
}

#[test]
fn golden_bundle_decodes_identically() {
    let dir = fixture_dir();
    if std::env::var_os("FORGE_BLESS_GOLDEN").is_some() {
        let _ = std::fs::remove_dir_all(&dir);
        bundle::save(&golden(), &dir).unwrap();
        // A key from a hypothetical later writer, to keep forward compatibility honest.
        let path = dir.join(bundle::MANIFEST);
        let mut v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        v["written_by"] = serde_json::json!("forge 1.x");
        std::fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    }
    let loaded = bundle::load(&dir).unwrap();
    assert_eq!(loaded, golden());
}

#[test]
fn golden_binary_arrays_reencode_byte_for_byte() {
    let dir = fixture_dir();
    let out = tempfile::tempdir().unwrap();
    let loaded = bundle::load(&dir).unwrap();
    let manifest = bundle::save(&loaded, out.path()).unwrap();
    let original = bundle::read_manifest(&dir).unwrap();
    for (rel, digest) in &manifest.files {
        if rel.ends_with(".bin") || rel.ends_with(".ply") || rel.ends_with(".pfm") {
            assert_eq!(Some(digest), original.files.get(rel), "{rel}");
        }
    }
}
