use std::time::{Duration, Instant};

use forge_core::expansion::{align_depth, alignment_objective};
use forge_core::geometry::{DepthMap, RegionMask};

use crate::CriterionReport;

pub const NAME: &str = "disparity alignment";

fn truth(w: usize, h: usize) -> DepthMap {
    let values = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            1.0 + 0.7 * y + 0.2 * x + 0.08 * (6.0 * x + 2.0 * y).sin()
        })
        .collect();
    DepthMap::from_values(w, h, values)
}

/// Depth whose disparity is `a·(1/z) + b`.
fn warped(d: &DepthMap, a: f64, b: f64) -> DepthMap {
    let values = d.values.iter().map(|z| 1.0 / (a / z + b)).collect();
    DepthMap::from_values(d.width, d.height, values)
}

/// Recovers every warp on a 7 × 5 grid over `[0.5, 2] × [−0.2, 0.2]`, fitted
/// on the left 60% of the frame.
pub fn alignment_suite() -> CriterionReport {
    let start = Instant::now();
    let (w, h) = (48, 36);
    let d = truth(w, h);
    let mask = RegionMask::from_fn(w, h, |x, _| if x * 5 < w * 3 { 1.0 } else { 0.0 });
    let mut worst_param = 0.0f64;
    let mut worst_obj = 0.0f64;
    let mut failures = 0;
    let mut cases = 0;
    for ia in 0..7 {
        for ib in 0..5 {
            let a = 0.5 + 0.25 * ia as f64;
            let b = -0.2 + 0.1 * ib as f64;
            cases += 1;
            match align_depth(&warped(&d, a, b), &d, &mask) {
                Ok((aligned, fit)) => {
                    let (ra, rb) = fit.warp();
                    worst_param = worst_param.max((ra - a).abs()).max((rb - b).abs());
                    worst_obj = worst_obj.max(alignment_objective(&aligned, &d, &mask));
                }
                Err(_) => failures += 1,
            }
        }
    }
    let ok = failures == 0 && worst_param < 1e-3 && worst_obj < 1e-6;
    CriterionReport::new(
        NAME,
        ok,
        format!(
            "{cases} warps: max parameter error {worst_param:.2e}, max objective {worst_obj:.2e}, {failures} failed fits"
        ),
        start.elapsed(),
        Duration::from_secs(10),
    )
}
