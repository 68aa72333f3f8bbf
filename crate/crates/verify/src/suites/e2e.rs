use std::time::{Duration, Instant};

use forge_core::config::ForgeConfig;
use forge_core::gaussian::Scene4D;
use forge_core::geometry::{CameraPose, ImagePlane};
use forge_core::pipeline;
use forge_core::world::MotionVariant;
use forge_core::Result;
use nalgebra::Vector3;

use crate::CriterionReport;

pub const NAME: &str = "end-to-end synthetic world";

pub const PROBE_TIMES: [f64; 3] = [0.25, 0.5, 0.75];
pub const PSNR_FLOOR: f64 = 25.0;

/// Scaled-down run: 3 videos of 25 frames at 64 × 64, 200 splats,
/// 500 canonical and 2000 joint iterations.
pub fn e2e_config(seed: u64) -> ForgeConfig {
    let mut cfg = ForgeConfig::default();
    cfg.expansion.steps = 3;
    cfg.expansion.seed = seed;
    cfg.animation.videos = 3;
    cfg.sampler.seed = seed;
    cfg.canonical.iterations = 500;
    cfg.canonical.max_splats = 200;
    cfg.canonical.seed = seed;
    cfg.train.iterations = 2000;
    cfg.train.seed = seed;
    cfg
}

/// A camera between the input view and the first expansion poses that no
/// stage trains on.
pub fn held_out_pose() -> CameraPose {
    CameraPose::look_from(Vector3::new(0.05, 0.03, 0.0), 0.04, 0.02)
}

pub struct E2eOutcome {
    /// PSNR at each probe time with the global embedding.
    pub psnr: Vec<f64>,
    /// Same probes after joint training without embeddings.
    pub ablation_psnr: Vec<f64>,
}

fn probe(
    scene: &Scene4D,
    cfg: &ForgeConfig,
    truth: &[ImagePlane],
    embedding: &[f64],
) -> Result<Vec<f64>> {
    let intr = cfg.camera.intrinsics()?;
    let pose = held_out_pose();
    Ok(PROBE_TIMES
        .iter()
        .zip(truth)
        .map(|(&t, gt)| {
            scene
                .render(&intr, &pose, t, embedding)
                .image
                .psnr(gt, None)
        })
        .collect())
}

/// Runs the pipeline once, then the joint stage a second time with the
/// embeddings disabled. Ground truth is the world under the mean of the
/// motion variants the videos were generated with.
pub fn e2e_run(cfg: &ForgeConfig) -> Result<E2eOutcome> {
    let intr = cfg.camera.intrinsics()?;
    let (plugins, _) = pipeline::connect_plugins(cfg)?;
    let input = pipeline::synthetic_input(cfg)?;
    let exp = pipeline::expand(&input, None, cfg, &plugins)?;
    let anim = pipeline::animate(&exp, cfg, &plugins)?;
    let masks = pipeline::masks(&exp, &anim, cfg)?;
    let videos = pipeline::video_set(&exp, &anim, &masks, cfg)?;
    let views = pipeline::canonical_supervision(&exp, cfg)?;
    let canonical = pipeline::fit_canonical(&exp, &views, cfg)?;

    let variants: Vec<MotionVariant> = (0..anim.videos.len())
        .map(|k| {
            cfg.world
                .motion
                .variant(cfg.sampler.seed.wrapping_add(k as u64))
        })
        .collect();
    let mean = MotionVariant::mean(&variants);
    let truth: Vec<ImagePlane> = PROBE_TIMES
        .iter()
        .map(|&t| cfg.world.render(&intr, &held_out_pose(), t, mean).0)
        .collect();

    let scene = pipeline::fit_4d(canonical.clone(), &videos, &views, cfg, &mut |_, _| Ok(()))?;
    let psnr = probe(&scene, cfg, &truth, &scene.global_embedding())?;

    let mut ablated = cfg.clone();
    ablated.train.use_embeddings = false;
    let single = pipeline::fit_4d(canonical, &videos, &views, &ablated, &mut |_, _| Ok(()))?;
    let ablation_psnr = probe(&single, &ablated, &truth, &single.global_embedding())?;
    Ok(E2eOutcome {
        psnr,
        ablation_psnr,
    })
}

pub fn e2e_suite(seed: u64) -> CriterionReport {
    let start = Instant::now();
    let budget = Duration::from_secs(15 * 60);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|p| format!("{p:.2}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    match e2e_run(&e2e_config(seed)) {
        Ok(out) => {
            let above = out.psnr.iter().all(|&p| p > PSNR_FLOOR);
            let lower = out
                .psnr
                .iter()
                .zip(&out.ablation_psnr)
                .all(|(with, without)| without < with);
            CriterionReport::new(
                NAME,
                above && lower,
                format!(
                    "held-out PSNR {} dB at t = 0.25/0.5/0.75 (floor {PSNR_FLOOR}), without embeddings {} dB",
                    fmt(&out.psnr),
                    fmt(&out.ablation_psnr)
                ),
                start.elapsed(),
                budget,
            )
        }
        Err(e) => CriterionReport::new(
            NAME,
            false,
            format!("pipeline error: {e}"),
            start.elapsed(),
            budget,
        ),
    }
}
