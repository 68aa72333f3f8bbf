use std::time::{Duration, Instant};

use forge_core::expansion::{laplacian, poisson_blend_with, PoissonSettings};
use forge_core::geometry::{ImagePlane, RegionMask};

use crate::CriterionReport;

pub const NAME: &str = "poisson blend";

fn texture(w: usize, h: usize, phase: f64) -> ImagePlane {
    ImagePlane::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        [
            0.45 + 0.15 * (3.0 * u + phase).sin() * (2.0 * v).cos(),
            0.5 + 0.12 * (4.0 * u * v - phase).cos(),
            0.35 + 0.1 * u + 0.15 * v,
        ]
    })
}

fn masks(w: usize, h: usize) -> Vec<RegionMask> {
    let disc = |cx: f64, cy: f64, r: f64| {
        RegionMask::from_fn(w, h, move |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= r {
                0.0
            } else {
                1.0
            }
        })
    };
    vec![
        disc(w as f64 * 0.5, h as f64 * 0.5, h as f64 * 0.3),
        disc(w as f64 * 0.3, h as f64 * 0.6, 4.0),
        RegionMask::from_fn(w, h, |x, _| if x < w / 4 { 0.0 } else { 1.0 }),
        RegionMask::from_fn(w, h, |x, y| {
            if (w / 3..2 * w / 3).contains(&x) && (h / 4..h / 2).contains(&y) {
                0.0
            } else {
                1.0
            }
        }),
    ]
}

/// Constant offsets over several fill shapes must vanish; free-form guidance
/// must keep its Laplacian on every fill pixel.
pub fn poisson_suite() -> CriterionReport {
    let start = Instant::now();
    let (w, h) = (64, 48);
    let known = texture(w, h, 0.0);
    let settings = PoissonSettings::default();
    let mut worst_offset = 0.0f64;
    let mut worst_lap = 0.0f64;
    let mut worst_res = 0.0f64;
    let mut errors = 0;
    let mut cases = 0;
    for mask in masks(w, h) {
        for shift in [[0.1, 0.1, 0.1], [-0.2, 0.05, 0.15], [0.3, -0.25, 0.0]] {
            cases += 1;
            let inpainted = ImagePlane::from_fn(w, h, |x, y| {
                let c = known.get(x, y);
                [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]
            });
            match poisson_blend_with(&inpainted, &known, &mask, settings) {
                Ok((out, report)) => {
                    worst_res = worst_res.max(report.residual);
                    for (a, b) in out.rgb.iter().zip(&known.rgb) {
                        for c in 0..3 {
                            worst_offset = worst_offset.max((a[c] - b[c]).abs());
                        }
                    }
                }
                Err(_) => errors += 1,
            }
        }
        cases += 1;
        let guide = texture(w, h, 1.3);
        match poisson_blend_with(&guide, &known, &mask, settings) {
            Ok((out, report)) => {
                worst_res = worst_res.max(report.residual);
                for y in 0..h {
                    for x in 0..w {
                        if mask.contains(y * w + x) {
                            continue;
                        }
                        for ch in 0..3 {
                            let gap = laplacian(&out, x, y, ch) - laplacian(&guide, x, y, ch);
                            worst_lap = worst_lap.max(gap.abs());
                        }
                    }
                }
            }
            Err(_) => errors += 1,
        }
    }
    let ok =
        errors == 0 && worst_offset < 1e-4 && worst_lap < 1e-6 && worst_res <= settings.tolerance;
    CriterionReport::new(
        NAME,
        ok,
        format!(
            "{cases} blends: max offset residual {worst_offset:.2e}, max Laplacian gap {worst_lap:.2e}, solver residual {worst_res:.1e}"
        ),
        start.elapsed(),
        Duration::from_secs(10),
    )
}
