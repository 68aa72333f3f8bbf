//! Guided Poisson blending of an inpainted image into a known image.

use crate::error::{Error, Result};
use crate::geometry::{ImagePlane, RegionMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonSettings {
    /// Relative residual `‖r‖ / ‖b‖` at which CG stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PoissonSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoissonReport {
    pub unknowns: usize,
    /// Largest CG iteration count over the three channels.
    pub iterations: usize,
    /// Largest final relative residual over the three channels.
    pub residual: f64,
}

/// Blends with default solver settings.
pub fn poisson_blend(
    inpainted: &ImagePlane,
    known: &ImagePlane,
    known_mask: &RegionMask,
) -> Result<ImagePlane> {
    poisson_blend_with(inpainted, known, known_mask, PoissonSettings::default()).map(|(img, _)| img)
}

/// Keeps `known` on the known region and, on the fill region, solves
/// `Δf = Δg` (4-neighbor Laplacian, `g` = inpainted) with Dirichlet values
/// taken from known neighbors. Missing neighbors at the image border are
/// Neumann. A fill component with no known neighbor has no anchor and keeps
/// its inpainted values.
pub fn poisson_blend_with(
    inpainted: &ImagePlane,
    known: &ImagePlane,
    known_mask: &RegionMask,
    settings: PoissonSettings,
) -> Result<(ImagePlane, PoissonReport)> {
    if !inpainted.same_size(known) || !known.same_size(known_mask) {
        return Err(Error::contract("poisson_blend: resolution mismatch"));
    }
    if !known_mask.is_binary() {
        return Err(Error::contract("poisson_blend: known mask must be binary"));
    }
    let (w, h) = (known.width, known.height);
    let n = w * h;
    let is_known: Vec<bool> = (0..n).map(|i| known_mask.contains(i)).collect();
    let neighbors = |i: usize| {
        let (x, y) = (i % w, i / w);
        [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ]
        .into_iter()
        .flatten()
    };

    // Fill components touching the known region are solved; the rest are
    // copied from the inpainted image.
    let mut anchored = vec![false; n];
    let mut seen = vec![false; n];
    for start in 0..n {
        if is_known[start] || seen[start] {
            continue;
        }
        let mut component = vec![start];
        seen[start] = true;
        let mut touches = false;
        let mut head = 0;
        while head < component.len() {
            let p = component[head];
            head += 1;
            for q in neighbors(p) {
                if is_known[q] {
                    touches = true;
                } else if !seen[q] {
                    seen[q] = true;
                    component.push(q);
                }
            }
        }
        if touches {
            for p in component {
                anchored[p] = true;
            }
        }
    }

    let mut out = known.clone();
    for i in 0..n {
        if !is_known[i] && !anchored[i] {
            out.rgb[i] = inpainted.rgb[i];
        }
    }
    let unknown: Vec<usize> = (0..n).filter(|i| anchored[*i]).collect();
    let mut report = PoissonReport {
        unknowns: unknown.len(),
        ..Default::default()
    };
    if unknown.is_empty() {
        return Ok((out.clamped(), report));
    }
    let mut slot = vec![usize::MAX; n];
    for (k, &p) in unknown.iter().enumerate() {
        slot[p] = k;
    }
    // Row k: degree, and the unknown neighbors.
    let rows: Vec<(f64, Vec<usize>)> = unknown
        .iter()
        .map(|&p| {
            let mut deg = 0.0;
            let mut cols = Vec::with_capacity(4);
            for q in neighbors(p) {
                deg += 1.0;
                if !is_known[q] {
                    cols.push(slot[q]);
                }
            }
            (deg, cols)
        })
        .collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        for (k, (deg, cols)) in rows.iter().enumerate() {
            let mut v = deg * x[k];
            for &c in cols {
                v -= x[c];
            }
            y[k] = v;
        }
    };

    for ch in 0..3 {
        let b: Vec<f64> = unknown
            .iter()
            .map(|&p| {
                let gp = inpainted.rgb[p][ch];
                let mut v = 0.0;
                for q in neighbors(p) {
                    v += gp - inpainted.rgb[q][ch];
                    if is_known[q] {
                        v += known.rgb[q][ch];
                    }
                }
                v
            })
            .collect();
        let x0: Vec<f64> = unknown.iter().map(|&p| inpainted.rgb[p][ch]).collect();
        let (x, iters, res) = conjugate_gradient(&apply, &b, x0, settings);
        report.iterations = report.iterations.max(iters);
        report.residual = report.residual.max(res);
        for (k, &p) in unknown.iter().enumerate() {
            out.rgb[p][ch] = x[k];
        }
    }
    Ok((out.clamped(), report))
}

/// Plain CG for a symmetric positive definite operator. Returns the solution,
/// iteration count and final relative residual.
fn conjugate_gradient(
    apply: &impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    mut x: Vec<f64>,
    settings: PoissonSettings,
) -> (Vec<f64>, usize, f64) {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
    let b_norm = dot(b, b).sqrt().max(1e-300);
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    let mut iters = 0;
    while iters < settings.max_iterations && rr.sqrt() / b_norm > settings.tolerance {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
        iters += 1;
    }
    (x, iters, rr.sqrt() / b_norm)
}

/// Discrete 4-neighbor Laplacian of one channel at pixel `(x, y)`, with
/// missing border neighbors dropped.
pub fn laplacian(img: &ImagePlane, x: usize, y: usize, ch: usize) -> f64 {
    let c = img.get(x, y)[ch];
    let mut v = 0.0;
    let (w, h) = (img.width, img.height);
    if x > 0 {
        v += img.get(x - 1, y)[ch] - c;
    }
    if x + 1 < w {
        v += img.get(x + 1, y)[ch] - c;
    }
    if y > 0 {
        v += img.get(x, y - 1)[ch] - c;
    }
    if y + 1 < h {
        v += img.get(x, y + 1)[ch] - c;
    }
    v
}

/// Largest absolute luminance difference between 4-neighbors straddling the
/// known/fill boundary.
pub fn seam_jump(img: &ImagePlane, known_mask: &RegionMask) -> f64 {
    let lum = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let (w, h) = (img.width, img.height);
    let mut worst: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (xx, yy) in [(x + 1, y), (x, y + 1)] {
                if xx >= w || yy >= h {
                    continue;
                }
                let j = yy * w + xx;
                if known_mask.contains(i) != known_mask.contains(j) {
                    worst = worst.max((lum(img.rgb[i]) - lum(img.rgb[j])).abs());
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smooth(w: usize, h: usize) -> ImagePlane {
        ImagePlane::from_fn(w, h, |x, y| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            [
                0.4 + 0.2 * (3.0 * u).sin() * (2.0 * v).cos(),
                0.5 + 0.15 * (u * v * 4.0).cos(),
                0.3 + 0.1 * u + 0.2 * v,
            ]
        })
    }

    fn disc_fill(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> RegionMask {
        RegionMask::from_fn(w, h, |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= r {
                0.0
            } else {
                1.0
            }
        })
    }

    #[test]
    fn constant_offset_is_removed() {
        let known = smooth(32, 24);
        let mask = disc_fill(32, 24, 14.0, 11.0, 7.0);
        // The inpainter drifted the whole frame; only the hole is taken from it.
        let mut inpainted = known.clone();
        for px in inpainted.rgb.iter_mut() {
            *px = px.map(|c| c + 0.15);
        }
        let out = poisson_blend(&inpainted, &known, &mask).unwrap();
        let worst = out
            .rgb
            .iter()
            .zip(&known.rgb)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "residual {worst}");
    }

    #[test]
    fn empty_fill_region_returns_known() {
        let known = smooth(8, 8);
        let inpainted = ImagePlane::filled(8, 8, [0.9; 3]);
        let out = poisson_blend(&inpainted, &known, &RegionMask::ones(8, 8)).unwrap();
        assert_eq!(out, known);
    }

    #[test]
    fn fill_touching_border_is_neumann() {
        let known = smooth(20, 16);
        // Fill the whole left strip, which touches three image borders.
        let mask = RegionMask::from_fn(20, 16, |x, _| if x < 6 { 0.0 } else { 1.0 });
        let inpainted = ImagePlane::from_fn(20, 16, |x, y| known.get(x, y).map(|c| c - 0.2));
        let out = poisson_blend(&inpainted, &known, &mask).unwrap();
        assert!(out.psnr(&known, None) > 80.0);
    }

    #[test]
    fn isolated_fill_keeps_inpainted_values() {
        let known = smooth(6, 6);
        let inpainted = ImagePlane::filled(6, 6, [0.7; 3]);
        let out = poisson_blend(&inpainted, &known, &RegionMask::zeros(6, 6)).unwrap();
        assert_eq!(out, inpainted);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let img = smooth(4, 4);
        assert!(poisson_blend(&img, &img, &RegionMask::filled(4, 4, 0.5)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn interior_laplacian_matches_guidance(
            cx in 6.0..18.0f64, cy in 6.0..12.0f64, r in 2.0..5.0f64, seed in 0u64..1000,
        ) {
            let known = smooth(24, 18);
            let mask = disc_fill(24, 18, cx, cy, r);
            let s = seed as f64;
            let inpainted = ImagePlane::from_fn(24, 18, |x, y| {
                let (u, v) = (x as f64, y as f64);
                [0.5 + 0.1 * (0.3 * u + s).sin(), 0.45 + 0.1 * (0.4 * v - s).cos(), 0.5 + 0.05 * (0.2 * (u + v)).sin()]
            });
            let (out, report) = poisson_blend_with(&inpainted, &known, &mask, PoissonSettings::default()).unwrap();
            prop_assert!(report.residual <= 1e-8);
            for y in 1..17 {
                for x in 1..23 {
                    if mask.contains(y * 24 + x) { continue; }
                    for ch in 0..3 {
                        let d = laplacian(&out, x, y, ch) - laplacian(&inpainted, x, y, ch);
                        prop_assert!(d.abs() < 1e-6, "laplacian gap {d}");
                    }
                }
            }
            // Outside the fill region nothing moves.
            for i in 0..known.rgb.len() {
                if mask.contains(i) { prop_assert_eq!(out.rgb[i], known.rgb[i]); }
            }
        }

        #[test]
        fn seam_jump_shrinks(offset in 0.05..0.3f64, r in 3.0..6.0f64) {
            let known = smooth(24, 20);
            let mask = disc_fill(24, 20, 12.0, 10.0, r);
            let mut inpainted = known.clone();
            for px in inpainted.rgb.iter_mut() { *px = px.map(|c| c - offset); }
            let mut naive = known.clone();
            for i in 0..naive.rgb.len() {
                if !mask.contains(i) { naive.rgb[i] = inpainted.rgb[i]; }
            }
            let out = poisson_blend(&inpainted, &known, &mask).unwrap();
            prop_assert!(seam_jump(&out, &mask) < seam_jump(&naive, &mask));
        }
    }
}
