use std::time::{Duration, Instant};

use forge_core::gaussian::{render, RenderSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::oracles::brute_render;
use crate::scenes::render_case;
use crate::CriterionReport;

pub const NAME: &str = "render oracle";

/// Engine renders of `scenes` random scenes against per-pixel compositing.
pub fn render_suite(scenes: usize, seed: u64) -> CriterionReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_rgb = 0.0f64;
    let mut worst_depth = 0.0f64;
    let mut depth_mismatch = 0usize;
    let mut pixels = 0usize;
    for _ in 0..scenes {
        let case = render_case(&mut rng, 20);
        let settings = RenderSettings {
            sh_degree: case.sh_degree,
        };
        let got = render(&case.splats, &case.intr, &case.pose, &settings);
        let want = brute_render(&case.splats, &case.intr, &case.pose, case.sh_degree);
        for i in 0..case.intr.pixel_count() {
            for c in 0..3 {
                worst_rgb = worst_rgb.max((got.image.rgb[i][c] - want.rgb[i][c]).abs());
            }
            worst_rgb = worst_rgb.max((got.alpha[i] - want.weight[i]).abs());
            let engine_depth = got.depth.valid[i].then(|| got.depth.values[i]);
            match (engine_depth, want.depth[i]) {
                (Some(a), Some(b)) => worst_depth = worst_depth.max((a - b).abs()),
                (None, None) => {}
                _ => depth_mismatch += 1,
            }
        }
        pixels += case.intr.pixel_count();
    }
    let ok = worst_rgb <= 1e-6 && worst_depth <= 1e-6 && depth_mismatch == 0;
    CriterionReport::new(
        NAME,
        ok,
        format!(
            "{scenes} scenes, {pixels} px: max |Δcolor| {worst_rgb:.2e}, max |Δdepth| {worst_depth:.2e}, {depth_mismatch} depth-validity mismatches"
        ),
        start.elapsed(),
        Duration::from_secs(5),
    )
}
