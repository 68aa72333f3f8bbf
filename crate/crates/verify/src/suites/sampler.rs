use std::time::{Duration, Instant};

use forge_core::anim::{
    animate_video, denoise_forward, render_static_video, reverse, sdedit_perturb, start_payload,
    time_reversal_step, SamplerConfig,
};
use forge_core::geometry::{unproject, CameraIntrinsics, CameraPose};
use forge_core::plugins::synthetic::SyntheticSettings;
use forge_core::plugins::{LatentVideo, Plugins};
use forge_core::trajectory::interpolate_poses;
use forge_core::world::SyntheticWorld;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CriterionReport;

pub const NAME: &str = "sampler identities";

fn random_latent(rng: &mut impl Rng, frames: usize) -> LatentVideo {
    let mut z = LatentVideo::zeros(frames, 3, 6, 5);
    z.data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-2.0..2.0));
    z
}

/// Each identity is checked for exact equality, never within a tolerance.
pub fn sampler_suite(seed: u64) -> CriterionReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures: Vec<String> = Vec::new();
    let mut checks = 0usize;
    let mut check = |name: &str, ok: bool| {
        checks += 1;
        if !ok && !failures.iter().any(|f| f == name) {
            failures.push(name.to_string());
        }
    };

    for frames in [1, 2, 5, 8, 25] {
        for _ in 0..4 {
            let z = random_latent(&mut rng, frames);
            check("reverse involution", reverse(&reverse(&z)) == z);
        }
    }

    let world = SyntheticWorld::default();
    let settings = SyntheticSettings::default();
    let plugins = Plugins::synthetic(world.clone(), &settings);
    let denoiser = plugins.denoiser.as_ref();
    let schedule = denoiser.schedule();
    for tau in [0, 0, 0, 0] {
        let z = random_latent(&mut rng, 4);
        let out = sdedit_perturb(&z, tau, schedule, rng.random(), 0);
        if tau == 0 {
            check("SDEdit tau=0 identity", out.is_ok_and(|o| o == z));
        }
    }

    let intr = CameraIntrinsics::centered(24.0, 20, 16).unwrap();
    let (img, depth) = world.render_static(&intr, &CameraPose::identity());
    let cloud = unproject(&img, &depth, &intr, &CameraPose::identity()).unwrap();
    let end_pose = CameraPose::look_from(Vector3::new(0.2, 0.05, 0.0), 0.1, -0.03);
    let traj = interpolate_poses(&CameraPose::identity(), &end_pose, 9).unwrap();
    let stat = render_static_video(&cloud, &traj, &intr, 1.0);
    let cfg = SamplerConfig::default();
    let start_c = start_payload(&stat[0], &traj, &intr, &cfg);
    let end_c = start_c.reversed_with(stat[8].clone());
    let z0 = plugins.codec.encode(&stat).unwrap();
    for step in [1, 5, 12, 16, 25] {
        let s: u64 = rng.random();
        let z = sdedit_perturb(&z0, step, schedule, s, 3).unwrap();
        let fused = time_reversal_step(&z, step, &start_c, &end_c, 1.0, denoiser, s).unwrap();
        let forward = denoiser.step(&z, step, &start_c, s).unwrap();
        check("w=1 fusion equals forward step", fused == forward);
    }
    // Whole chains: w = 1 at every step is plain forward denoising.
    for tau in [1, 9, 16] {
        let s: u64 = rng.random();
        let mut z = sdedit_perturb(&z0, tau, schedule, s, 0).unwrap();
        let plain = denoise_forward(z.clone(), &start_c, denoiser, s).unwrap();
        for step in (1..=tau).rev() {
            z = time_reversal_step(&z, step, &start_c, &end_c, 1.0, denoiser, s).unwrap();
        }
        check("w=1 fusion chain equals forward denoising", z == plain);
    }

    for n in [0, 1, 2, 5, 8] {
        for s in 0..2 {
            let cfg = SamplerConfig {
                end_transition_n: n,
                fuse_weight: 0.3 + 0.2 * s as f64,
                ..Default::default()
            };
            match animate_video(&stat, &traj, &intr, &cfg, &plugins, s) {
                Ok(video) => check("final frame equals end view", video[8] == stat[8]),
                Err(_) => check("final frame equals end view", false),
            }
        }
    }

    let ok = failures.is_empty();
    CriterionReport::new(
        NAME,
        ok,
        if ok {
            format!("{checks} exact checks")
        } else {
            format!("{checks} exact checks, broken: {}", failures.join("; "))
        },
        start.elapsed(),
        Duration::from_secs(5),
    )
}
