//! Real spherical harmonics up to degree 3 in the usual splatting sign
//! convention, with derivatives for the view-direction chain rule.

use nalgebra::Vector3;

pub const SH_COEFFS: usize = 16;
pub const SH_MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel used at `degree`.
pub fn coeffs_for_degree(degree: usize) -> usize {
    (degree.min(SH_MAX_DEGREE) + 1).pow(2)
}

/// Basis values at unit direction `d`; entries beyond `degree` are zero.
pub fn basis(d: &Vector3<f64>, degree: usize) -> [f64; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; SH_COEFFS];
    b[0] = C0;
    if degree >= 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = C3[0] * y * (3.0 * xx - yy);
            b[10] = C3[1] * x * y * z;
            b[11] = C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = C3[5] * z * (xx - yy);
            b[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial in `(x, y, z)`.
pub fn basis_gradient(d: &Vector3<f64>, degree: usize) -> [Vector3<f64>; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = [Vector3::zeros(); SH_COEFFS];
    if degree >= 1 {
        g[1] = Vector3::new(0.0, -C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, C1);
        g[3] = Vector3::new(-C1, 0.0, 0.0);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[4] = C2[0] * Vector3::new(y, x, 0.0);
        g[5] = C2[1] * Vector3::new(0.0, z, y);
        g[6] = C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = C2[3] * Vector3::new(z, 0.0, x);
        g[8] = C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
        if degree >= 3 {
            g[9] = C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
            g[10] = C3[1] * Vector3::new(y * z, x * z, x * y);
            g[11] = C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
            g[12] =
                C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
            g[13] = C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
            g[14] = C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
            g[15] = C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
        }
    }
    g
}

/// Coefficient layout is `sh[coeff * 3 + channel]`; color is `0.5 + Σ B·sh`.
pub fn eval_color(sh: &[f64; 48], d: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let b = basis(d, degree);
    let mut c = [0.5; 3];
    for (l, bl) in b.iter().enumerate().take(coeffs_for_degree(degree)) {
        for (ch, cc) in c.iter_mut().enumerate() {
            *cc += bl * sh[l * 3 + ch];
        }
    }
    c
}

/// DC coefficients reproducing a flat `color`.
pub fn dc_from_color(color: [f64; 3]) -> [f64; 3] {
    color.map(|c| (c - 0.5) / C0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_differences() {
        let d = Vector3::new(0.3, -0.5, 0.8);
        let g = basis_gradient(&d, 3);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (basis(&p, 3), basis(&m, 3));
            for l in 0..SH_COEFFS {
                let fd = (bp[l] - bm[l]) / (2.0 * h);
                assert!((fd - g[l][axis]).abs() < 1e-8, "l={l} axis={axis}");
            }
        }
    }

    #[test]
    fn dc_round_trip_and_orthonormal_band_one() {
        let mut sh = [0.0; 48];
        sh[..3].copy_from_slice(&dc_from_color([0.2, 0.7, 1.0]));
        let c = eval_color(&sh, &Vector3::z(), 3);
        for (a, b) in c.iter().zip([0.2, 0.7, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        // Monte Carlo check that band-1 functions have unit norm on the sphere.
        let n = 200;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..2 * n {
                let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                let phi = std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
                let d = Vector3::new(
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                );
                let w = theta.sin() * (std::f64::consts::PI / n as f64).powi(2);
                acc += basis(&d, 1)[2].powi(2) * w;
            }
        }
        assert!((acc - 1.0).abs() < 1e-3, "{acc}");
    }

    #[test]
    fn higher_bands_masked_by_degree() {
        let d = Vector3::new(0.6, 0.0, 0.8);
        assert!(basis(&d, 1)[4..].iter().all(|v| *v == 0.0));
        assert_eq!(coeffs_for_degree(3), 16);
        assert_eq!(coeffs_for_degree(0), 1);
    }
}
