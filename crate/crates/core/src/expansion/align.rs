//! Disparity alignment of a freshly estimated depth map against rendered
//! depth on the known region.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, RegionMask};

/// Known pixels needed before a fit is attempted.
pub const MIN_SUPPORT: usize = 16;

/// Global correction `d' = scale·d + shift` applied to disparities.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisparityFit {
    pub scale: f64,
    pub shift: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
}

impl DisparityFit {
    pub const IDENTITY: DisparityFit = DisparityFit {
        scale: 1.0,
        shift: 0.0,
        objective_before: 0.0,
        objective_after: 0.0,
        iterations: 0,
    };

    /// The warp `d -> a·d + b` this correction undoes.
    pub fn warp(&self) -> (f64, f64) {
        (1.0 / self.scale, -self.shift / self.scale)
    }

    pub fn apply(&self, disparity: f64) -> f64 {
        self.scale * disparity + self.shift
    }
}

fn pair_term(new_disp: f64, known_disp: f64) -> f64 {
    ((new_disp - known_disp) / (new_disp + known_disp)).powi(2)
}

/// `Σ m·((1/d_new − 1/d)/(1/d_new + 1/d))²` over pixels valid in both maps.
pub fn alignment_objective(new_depth: &DepthMap, known_depth: &DepthMap, mask: &RegionMask) -> f64 {
    let mut total = 0.0;
    for i in 0..mask.weights.len() {
        let m = mask.weights[i];
        if m > 0.0 && new_depth.valid[i] && known_depth.valid[i] {
            total += m * pair_term(1.0 / new_depth.values[i], 1.0 / known_depth.values[i]);
        }
    }
    total
}

/// Fits the disparity correction by damped Gauss-Newton (Levenberg-Marquardt
/// on two parameters), starting from the linear least-squares fit.
pub fn fit_disparity(
    new_depth: &DepthMap,
    known_depth: &DepthMap,
    mask: &RegionMask,
) -> Result<DisparityFit> {
    let dims = (new_depth.width, new_depth.height);
    if dims != (known_depth.width, known_depth.height) || dims != (mask.width, mask.height) {
        return Err(Error::contract("align_depth: resolution mismatch"));
    }
    let samples: Vec<(f64, f64, f64)> = (0..mask.weights.len())
        .filter(|&i| mask.weights[i] > 0.0 && new_depth.valid[i] && known_depth.valid[i])
        .map(|i| {
            (
                1.0 / new_depth.values[i],
                1.0 / known_depth.values[i],
                mask.weights[i],
            )
        })
        .collect();
    let support = (0..mask.weights.len())
        .filter(|&i| mask.contains(i) && new_depth.valid[i] && known_depth.valid[i])
        .count();
    if support < MIN_SUPPORT {
        return Err(Error::AlignmentUnderdetermined {
            support,
            required: MIN_SUPPORT,
        });
    }
    let objective = |a: f64, b: f64| -> f64 {
        samples
            .iter()
            .map(|&(x, k, m)| {
                let s = a * x + b;
                if s <= 0.0 {
                    f64::INFINITY
                } else {
                    m * pair_term(s, k)
                }
            })
            .sum()
    };
    let before = objective(1.0, 0.0);

    // Weighted linear regression k ≈ a·x + b as the starting point.
    let (mut sw, mut sx, mut sk, mut sxx, mut sxk) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, k, m) in &samples {
        sw += m;
        sx += m * x;
        sk += m * k;
        sxx += m * x * x;
        sxk += m * x * k;
    }
    let det = sw * sxx - sx * sx;
    let (mut a, mut b) = if det.abs() > 1e-12 * sw * sxx {
        ((sw * sxk - sx * sk) / det, (sxx * sk - sx * sxk) / det)
    } else {
        (sk / sx, 0.0)
    };
    if !objective(a, b).is_finite() {
        a = sk / sx;
        b = 0.0;
    }
    if !objective(a, b).is_finite() || objective(1.0, 0.0) < objective(a, b) {
        a = 1.0;
        b = 0.0;
    }

    let mut f = objective(a, b);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        // Normal equations of the residuals r = (s − k)/(s + k).
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, k, m) in &samples {
            let s = a * x + b;
            let r = (s - k) / (s + k);
            let drds = 2.0 * k / ((s + k) * (s + k));
            let (ja, jb) = (drds * x, drds);
            jaa += m * ja * ja;
            jab += m * ja * jb;
            jbb += m * jb * jb;
            ga += m * ja * r;
            gb += m * jb * r;
        }
        if ga.abs().max(gb.abs()) < 1e-20 {
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let (haa, hbb) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let d = haa * hbb - jab * jab;
            if d <= 0.0 {
                lambda *= 10.0;
                continue;
            }
            let da = -(hbb * ga - jab * gb) / d;
            let db = -(haa * gb - jab * ga) / d;
            let f_new = objective(a + da, b + db);
            if f_new <= f {
                let small =
                    da.abs() <= 1e-15 * a.abs().max(1.0) && db.abs() <= 1e-15 * b.abs().max(1.0);
                a += da;
                b += db;
                f = f_new;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(DisparityFit {
        scale: a,
        shift: b,
        objective_before: before,
        objective_after: f,
        iterations,
    })
}

/// Fits the correction on the known region and applies it to the whole map.
/// Pixels whose corrected disparity is not positive become invalid.
pub fn align_depth(
    new_depth: &DepthMap,
    known_depth: &DepthMap,
    known_mask: &RegionMask,
) -> Result<(DepthMap, DisparityFit)> {
    let fit = fit_disparity(new_depth, known_depth, known_mask)?;
    Ok((apply_fit(new_depth, &fit), fit))
}

pub fn apply_fit(depth: &DepthMap, fit: &DisparityFit) -> DepthMap {
    let mut out = DepthMap::invalid(depth.width, depth.height);
    for i in 0..depth.values.len() {
        if depth.valid[i] {
            let s = fit.apply(1.0 / depth.values[i]);
            if s > 0.0 && s.is_finite() {
                out.values[i] = 1.0 / s;
                out.valid[i] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Tilted-plane style depth in `[1, 2]`.
    fn truth(w: usize, h: usize) -> DepthMap {
        let values = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
                1.0 + 0.6 * y + 0.3 * x + 0.1 * (5.0 * x).sin()
            })
            .collect();
        DepthMap::from_values(w, h, values)
    }

    fn warped(d: &DepthMap, a: f64, b: f64) -> DepthMap {
        let values = d.values.iter().map(|z| 1.0 / (a / z + b)).collect();
        DepthMap::from_values(d.width, d.height, values)
    }

    #[test]
    fn identical_depths_need_no_correction() {
        let d = truth(16, 12);
        let mask = RegionMask::ones(16, 12);
        let fit = fit_disparity(&d, &d, &mask).unwrap();
        assert_eq!(fit.objective_before, 0.0);
        assert!((fit.scale - 1.0).abs() < 1e-12 && fit.shift.abs() < 1e-12);
    }

    #[test]
    fn single_pixel_objective() {
        let new = DepthMap::from_values(1, 1, vec![1.0 / 3.0]);
        let known = DepthMap::from_values(1, 1, vec![1.0]);
        let v = alignment_objective(&new, &known, &RegionMask::ones(1, 1));
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn small_support_is_underdetermined() {
        let d = truth(8, 8);
        let mask = RegionMask::from_fn(8, 8, |x, y| if x < 3 && y < 5 { 1.0 } else { 0.0 });
        match fit_disparity(&d, &d, &mask) {
            Err(Error::AlignmentUnderdetermined {
                support: 15,
                required: 16,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recovers_stand_in_warp() {
        let d = truth(24, 20);
        let new = warped(&d, 2.0, 0.1);
        let mask = RegionMask::from_fn(24, 20, |x, _| if x < 12 { 1.0 } else { 0.0 });
        let (aligned, fit) = align_depth(&new, &d, &mask).unwrap();
        let (a, b) = fit.warp();
        assert!((a - 2.0).abs() < 1e-3 && (b - 0.1).abs() < 1e-3, "{a} {b}");
        assert!(alignment_objective(&aligned, &d, &mask) < 1e-6);
        // Applied to the whole map, so the unknown half is corrected as well.
        for i in 0..d.values.len() {
            assert!((aligned.values[i] - d.values[i]).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn alignment_is_idempotent(a in 0.5..2.0f64, b in -0.2..0.2f64) {
            let d = truth(20, 16);
            let mask = RegionMask::ones(20, 16);
            let (once, _) = align_depth(&warped(&d, a, b), &d, &mask).unwrap();
            let (twice, fit) = align_depth(&once, &d, &mask).unwrap();
            prop_assert!((fit.scale - 1.0).abs() < 1e-6 && fit.shift.abs() < 1e-6);
            for (x, y) in once.values.iter().zip(&twice.values) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
