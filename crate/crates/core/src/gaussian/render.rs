//! Tile-based splat rasterizer with an analytic backward pass.
//!
//! Splats are projected with the local affine approximation of the
//! perspective map, sorted front to back, and composited per pixel as
//! `C = Σ cᵢ αᵢ Πⱼ₍ⱼ₍ᵢ₎(1 − αⱼ)` over a black background. Depth is the
//! expected depth under the same weights, normalized by their sum.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::sh;
use super::{rotation_matrix, rotation_matrix_backward, sigmoid, GaussianSplat};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, ImagePlane};

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every screen-space covariance, in px².
pub const LOW_PASS: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a splat contributes nothing.
pub const TRUNCATION: f64 = 9.0;
/// Accumulated weight below which rendered depth is marked invalid.
pub const DEPTH_MIN_WEIGHT: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub sh_degree: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            sh_degree: sh::SH_MAX_DEGREE,
        }
    }
}

/// A splat in screen space plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Projected {
    pub index: usize,
    pub mean: [f64; 2],
    /// Inverse screen covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Pixel rectangle `[x0, x1) × [y0, y1)` that can receive weight.
    pub rect: [usize; 4],
    cam: Vector3<f64>,
    cov_cam: Matrix3<f64>,
    jacobian: Matrix2x3<f64>,
    view_dir: Vector3<f64>,
    view_len: f64,
}

/// Projects one splat; `None` behind the near plane or off screen.
pub fn project_splat(
    s: &GaussianSplat,
    index: usize,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> Option<Projected> {
    let cam = pose.world_to_camera(&s.position);
    if cam.z <= NEAR_PLANE {
        return None;
    }
    let w = pose.rotation_matrix();
    let cov_cam = w * s.covariance() * w.transpose();
    let jacobian = jacobian(intr, &cam);
    let mut cov2 = jacobian * cov_cam * jacobian.transpose();
    cov2[(0, 0)] += LOW_PASS;
    cov2[(1, 1)] += LOW_PASS;
    let (a, b, c) = (cov2[(0, 0)], cov2[(0, 1)], cov2[(1, 1)]);
    let det = a * c - b * b;
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean = [
        intr.fx * cam.x / cam.z + intr.cx,
        intr.fy * cam.y / cam.z + intr.cy,
    ];
    let mid = 0.5 * (a + c);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda.sqrt() * (1.0 + 1e-9) + 1e-9;
    let lo = |m: f64| (m - radius).ceil().max(0.0);
    let hi = |m: f64, n: usize| ((m + radius).floor() + 1.0).min(n as f64);
    let rect = [
        lo(mean[0]),
        hi(mean[0], intr.width),
        lo(mean[1]),
        hi(mean[1], intr.height),
    ];
    if rect[0] >= rect[1] || rect[2] >= rect[3] {
        return None;
    }
    let view = s.position - pose.center();
    let view_len = view.norm();
    let view_dir = view / view_len;
    Some(Projected {
        index,
        mean,
        conic,
        opacity: sigmoid(s.opacity_logit),
        color: sh::eval_color(&s.sh, &view_dir, settings.sh_degree),
        depth: cam.z,
        rect: rect.map(|v| v as usize),
        cam,
        cov_cam,
        jacobian,
        view_dir,
        view_len,
    })
}

fn jacobian(intr: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * p.x * iz2,
        0.0,
        intr.fy * iz,
        -intr.fy * p.y * iz2,
    )
}

/// Weight of a projected splat at pixel `(x, y)` and the quadratic form.
#[inline]
fn alpha_at(p: &Projected, x: f64, y: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = x - p.mean[0];
    let dy = y - p.mean[1];
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    if q > TRUNCATION {
        return None;
    }
    let g = (-0.5 * q).exp();
    Some((p.opacity * g, g, dx, dy))
}

/// Canonical front-to-back order: camera depth, then world position and the
/// remaining parameters, so storage order never matters.
fn order(a: &(f64, &GaussianSplat, usize), b: &(f64, &GaussianSplat, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| {
            let (x, y) = (a.1.to_array(), b.1.to_array());
            x.iter()
                .zip(&y)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .then(a.2.cmp(&b.2))
}

pub struct RenderOutput {
    pub image: ImagePlane,
    pub depth: DepthMap,
    /// Sum of compositing weights per pixel.
    pub alpha: Vec<f64>,
    /// Visible splats in compositing order.
    pub projected: Vec<Projected>,
    /// Per tile, indices into `projected` in compositing order.
    pub tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

/// Renders `splats` from `pose`.
pub fn render(
    splats: &[GaussianSplat],
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> RenderOutput {
    let mut projected: Vec<Projected> = splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(s, i, intr, pose, settings))
        .collect();
    projected.sort_by(|a, b| {
        order(
            &(a.depth, &splats[a.index], a.index),
            &(b.depth, &splats[b.index], b.index),
        )
    });

    let tiles_x = intr.width.div_ceil(TILE_SIZE);
    let tiles_y = intr.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in projected.iter().enumerate() {
        let [x0, x1, y0, y1] = p.rect;
        for ty in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let (w, h) = (intr.width, intr.height);
    let shaded: Vec<Vec<(usize, [f64; 3], f64, f64)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let mut trans = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut num = 0.0;
                    let mut acc = 0.0;
                    for &k in list {
                        let p = &projected[k as usize];
                        let Some((alpha, ..)) = alpha_at(p, x as f64, y as f64) else {
                            continue;
                        };
                        let wgt = alpha * trans;
                        for (c, pc) in rgb.iter_mut().zip(&p.color) {
                            *c += pc * wgt;
                        }
                        num += p.depth * wgt;
                        acc += wgt;
                        trans *= 1.0 - alpha;
                    }
                    out.push((y * w + x, rgb, num, acc));
                }
            }
            out
        })
        .collect();

    let mut image = ImagePlane::new(w, h);
    let mut depth = DepthMap::invalid(w, h);
    let mut alpha = vec![0.0; w * h];
    for (i, rgb, num, acc) in shaded.into_iter().flatten() {
        image.rgb[i] = rgb;
        alpha[i] = acc;
        if acc > DEPTH_MIN_WEIGHT {
            depth.values[i] = num / acc;
            depth.valid[i] = true;
        }
    }
    RenderOutput {
        image,
        depth,
        alpha,
        projected,
        tiles,
        tiles_x,
    }
}

/// Gradient with respect to the screen-space quantities of one splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScreenGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Back-propagates per-pixel gradients of a scalar loss with respect to the
/// rendered image (`grad_rgb`) and rendered depth (`grad_depth`, ignored on
/// invalid pixels) to the splat parameters. Returns one gradient per input
/// splat; splats that were not drawn get zeros.
pub fn render_backward(
    splats: &[GaussianSplat],
    out: &RenderOutput,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    settings: &RenderSettings,
    grad_rgb: &[[f64; 3]],
    grad_depth: &[f64],
) -> Vec<GaussianSplat> {
    let (w, h) = (intr.width, intr.height);
    let projected = &out.projected;
    let per_tile: Vec<Vec<ScreenGrad>> = out
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut local = vec![ScreenGrad::default(); list.len()];
            let (tx, ty) = (t % out.tiles_x, t / out.tiles_x);
            let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let i = y * w + x;
                    let g_rgb = grad_rgb[i];
                    let mut g_num = 0.0;
                    let mut g_acc = 0.0;
                    if out.depth.valid[i] && grad_depth[i] != 0.0 {
                        let acc = out.alpha[i];
                        g_num = grad_depth[i] / acc;
                        g_acc = -grad_depth[i] * out.depth.values[i] / acc;
                    }
                    if g_rgb == [0.0; 3] && g_num == 0.0 && g_acc == 0.0 {
                        continue;
                    }
                    hits.clear();
                    let mut trans = 1.0;
                    for (slot, &k) in list.iter().enumerate() {
                        let p = &projected[k as usize];
                        if let Some((alpha, g, dx, dy)) = alpha_at(p, x as f64, y as f64) {
                            hits.push((slot, alpha, trans, g, dx, dy));
                            trans *= 1.0 - alpha;
                        }
                    }
                    let g = [g_rgb[0], g_rgb[1], g_rgb[2], g_num, g_acc];
                    let mut suffix = [0.0; 5];
                    for &(slot, alpha, trans, gauss, dx, dy) in hits.iter().rev() {
                        let p = &projected[list[slot] as usize];
                        let v = [p.color[0], p.color[1], p.color[2], p.depth, 1.0];
                        let d_alpha: f64 = (0..5).map(|c| trans * (v[c] - suffix[c]) * g[c]).sum();
                        let wgt = alpha * trans;
                        let sg = &mut local[slot];
                        for c in 0..3 {
                            sg.color[c] += wgt * g[c];
                        }
                        sg.depth += wgt * g[3];
                        sg.opacity += d_alpha * gauss;
                        let d_q = d_alpha * -0.5 * alpha;
                        let [a, b, c] = p.conic;
                        sg.mean[0] += d_q * -(2.0 * a * dx + 2.0 * b * dy);
                        sg.mean[1] += d_q * -(2.0 * b * dx + 2.0 * c * dy);
                        sg.conic[0] += d_q * dx * dx;
                        sg.conic[1] += d_q * 2.0 * dx * dy;
                        sg.conic[2] += d_q * dy * dy;
                        for c in 0..5 {
                            suffix[c] = alpha * v[c] + (1.0 - alpha) * suffix[c];
                        }
                    }
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); projected.len()];
    for (list, local) in out.tiles.iter().zip(&per_tile) {
        for (&k, g) in list.iter().zip(local) {
            screen[k as usize].add(g);
        }
    }

    let chained: Vec<(usize, GaussianSplat)> = projected
        .par_iter()
        .zip(&screen)
        .map(|(p, g)| {
            (
                p.index,
                splat_backward(&splats[p.index], p, g, intr, pose, settings),
            )
        })
        .collect();
    let mut grads = vec![GaussianSplat::zeros(); splats.len()];
    for (i, g) in chained {
        grads[i] = g;
    }
    grads
}

fn splat_backward(
    s: &GaussianSplat,
    p: &Projected,
    g: &ScreenGrad,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> GaussianSplat {
    let mut out = GaussianSplat::zeros();
    out.opacity_logit = g.opacity * p.opacity * (1.0 - p.opacity);

    // Color: SH coefficients and view direction.
    let basis = sh::basis(&p.view_dir, settings.sh_degree);
    let used = sh::coeffs_for_degree(settings.sh_degree);
    let mut d_dir = Vector3::zeros();
    let basis_grad = sh::basis_gradient(&p.view_dir, settings.sh_degree);
    for l in 0..used {
        let mut dot = 0.0;
        for ch in 0..3 {
            out.sh[l * 3 + ch] = basis[l] * g.color[ch];
            dot += s.sh[l * 3 + ch] * g.color[ch];
        }
        d_dir += basis_grad[l] * dot;
    }
    let dvec = (d_dir - p.view_dir * p.view_dir.dot(&d_dir)) / p.view_len;
    out.position += dvec;

    // Conic -> screen covariance.
    let k = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let gk = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov2 = -(k * gk * k);

    // Screen covariance -> camera covariance and Jacobian.
    let j = &p.jacobian;
    let g_cov_cam = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * p.cov_cam;

    // Mean, depth and Jacobian -> camera-space position.
    let (x, y, z) = (p.cam.x, p.cam.y, p.cam.z);
    let (fx, fy) = (intr.fx, intr.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_cam = Vector3::new(
        g.mean[0] * fx * iz,
        g.mean[1] * fy * iz,
        -g.mean[0] * fx * x * iz2 - g.mean[1] * fy * y * iz2 + g.depth,
    );
    g_cam.x += g_j[(0, 2)] * -fx * iz2;
    g_cam.y += g_j[(1, 2)] * -fy * iz2;
    g_cam.z += g_j[(0, 0)] * -fx * iz2
        + g_j[(0, 2)] * 2.0 * fx * x * iz3
        + g_j[(1, 1)] * -fy * iz2
        + g_j[(1, 2)] * 2.0 * fy * y * iz3;
    let wm = pose.rotation_matrix();
    out.position += wm.transpose() * g_cam;

    // Camera covariance -> rotation and scale.
    let g_cov3 = wm.transpose() * g_cov_cam * wm;
    let r = rotation_matrix(&s.rotation);
    let scale = s.scale();
    let m = r * Matrix3::from_diagonal(&scale);
    let g_m = 2.0 * g_cov3 * m;
    let mut g_r = Matrix3::zeros();
    for col in 0..3 {
        let mut ds = 0.0;
        for row in 0..3 {
            g_r[(row, col)] = g_m[(row, col)] * scale[col];
            ds += g_m[(row, col)] * r[(row, col)];
        }
        out.log_scale[col] = ds * scale[col];
    }
    out.rotation = rotation_matrix_backward(&s.rotation, &g_r);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::logit;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::centered(20.0, 21, 21).unwrap()
    }

    /// A splat so wide it is flat over the center pixel, with given
    /// composited opacity there.
    fn flat(z: f64, alpha: f64, color: f64) -> GaussianSplat {
        let mut s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, z), 100.0, 0.5, [color; 3]);
        s.opacity_logit = logit(alpha);
        s
    }

    #[test]
    fn single_splat_pixel() {
        let out = render(
            &[flat(2.0, 0.5, 1.0)],
            &intr(),
            &CameraPose::identity(),
            &RenderSettings::default(),
        );
        let c = out.image.get(10, 10);
        assert!((c[0] - 0.5).abs() < 1e-12, "{c:?}");
        assert!((out.depth.get(10, 10).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_splats_composite_front_to_back() {
        let splats = [flat(3.0, 0.5, 1.0), flat(2.0, 0.5, 0.2)];
        let out = render(
            &splats,
            &intr(),
            &CameraPose::identity(),
            &RenderSettings::default(),
        );
        let c = out.image.get(10, 10)[0];
        assert!((c - 0.35).abs() < 1e-12, "{c}");
    }

    #[test]
    fn behind_camera_and_empty_scene() {
        let out = render(
            &[flat(-1.0, 0.9, 1.0)],
            &intr(),
            &CameraPose::identity(),
            &RenderSettings::default(),
        );
        assert!(out.projected.is_empty());
        assert!(out.image.rgb.iter().all(|c| *c == [0.0; 3]));
        let out = render(
            &[],
            &intr(),
            &CameraPose::identity(),
            &RenderSettings::default(),
        );
        assert_eq!(out.depth.valid_count(), 0);
    }

    #[test]
    fn truncated_at_three_sigma() {
        let mut s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.99, [1.0; 3]);
        s.sh[..3].copy_from_slice(&sh::dc_from_color([1.0; 3]));
        let intr = CameraIntrinsics::centered(20.0, 41, 41).unwrap();
        let out = render(
            &[s],
            &intr,
            &CameraPose::identity(),
            &RenderSettings::default(),
        );
        // Screen std is sqrt(1 + 0.3) px, so pixels more than 3.42 px away are dark.
        let sigma = (1.0f64 + LOW_PASS).sqrt();
        for x in 0..41 {
            let d = (x as f64 - 20.0).abs();
            let v = out.image.get(x, 20)[0];
            if d > 3.0 * sigma {
                assert_eq!(v, 0.0, "x={x}");
            } else {
                assert!(v > 0.0, "x={x}");
            }
        }
    }
}
