//! Per-pixel compositing straight from the definition: every splat is tested
//! against every pixel, in exact depth order, with no tiles, bounding boxes
//! or cached projections.

use forge_core::gaussian::GaussianSplat;
use forge_core::geometry::{CameraIntrinsics, CameraPose};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use std::f64::consts::PI;

const NEAR: f64 = 0.01;
const DILATION: f64 = 0.3;
const CUTOFF: f64 = 9.0;
const MIN_WEIGHT: f64 = 1e-2;

/// Real SH normalization constants in closed form.
fn sh_constants() -> [f64; 16] {
    let s = |v: f64| v.sqrt();
    [
        0.5 * s(1.0 / PI),
        -s(3.0 / (4.0 * PI)),
        s(3.0 / (4.0 * PI)),
        -s(3.0 / (4.0 * PI)),
        0.5 * s(15.0 / PI),
        -0.5 * s(15.0 / PI),
        0.25 * s(5.0 / PI),
        -0.5 * s(15.0 / PI),
        0.25 * s(15.0 / PI),
        -0.25 * s(35.0 / (2.0 * PI)),
        0.5 * s(105.0 / PI),
        -0.25 * s(21.0 / (2.0 * PI)),
        0.25 * s(7.0 / PI),
        -0.25 * s(21.0 / (2.0 * PI)),
        0.25 * s(105.0 / PI),
        -0.25 * s(35.0 / (2.0 * PI)),
    ]
}

fn sh_polys(d: &Vector3<f64>) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        1.0,
        y,
        z,
        x,
        x * y,
        y * z,
        3.0 * z * z - 1.0,
        x * z,
        x * x - y * y,
        y * (3.0 * x * x - y * y),
        x * y * z,
        y * (5.0 * z * z - 1.0),
        z * (5.0 * z * z - 3.0),
        x * (5.0 * z * z - 1.0),
        z * (x * x - y * y),
        x * (x * x - 3.0 * y * y),
    ]
}

/// View-dependent color with `0.5` offset; `d` is a unit vector.
pub fn sh_color(sh: &[f64; 48], d: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let k = sh_constants();
    let p = sh_polys(d);
    let used = (degree + 1) * (degree + 1);
    let mut c = [0.5; 3];
    for l in 0..used {
        for (ch, v) in c.iter_mut().enumerate() {
            *v += k[l] * p[l] * sh[l * 3 + ch];
        }
    }
    c
}

struct Screen {
    z: f64,
    mean: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

fn to_screen(
    s: &GaussianSplat,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    degree: usize,
) -> Option<Screen> {
    let cam = pose.world_to_camera(&s.position);
    if cam.z <= NEAR {
        return None;
    }
    let [w, x, y, z] = s.rotation;
    let r = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner();
    let scale = Matrix3::from_diagonal(&s.log_scale.map(f64::exp));
    let world_cov = r * scale * scale * r.transpose();
    let view = pose.rotation.to_rotation_matrix().into_inner();
    let j = Matrix2x3::new(
        intr.fx / cam.z,
        0.0,
        -intr.fx * cam.x / (cam.z * cam.z),
        0.0,
        intr.fy / cam.z,
        -intr.fy * cam.y / (cam.z * cam.z),
    );
    let cov =
        j * view * world_cov * view.transpose() * j.transpose() + Matrix2::identity() * DILATION;
    if cov.determinant() <= 0.0 {
        return None;
    }
    let inv_cov = cov.try_inverse()?;
    let dir = (s.position - pose.center()).normalize();
    Some(Screen {
        z: cam.z,
        mean: Vector2::new(
            intr.fx * cam.x / cam.z + intr.cx,
            intr.fy * cam.y / cam.z + intr.cy,
        ),
        inv_cov,
        opacity: 1.0 / (1.0 + (-s.opacity_logit).exp()),
        color: sh_color(&s.sh, &dir, degree),
    })
}

/// Color, expected depth (`None` below the weight floor) and total weight
/// of every pixel, row-major.
pub struct BruteImage {
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<Option<f64>>,
    pub weight: Vec<f64>,
}

pub fn brute_render(
    splats: &[GaussianSplat],
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    degree: usize,
) -> BruteImage {
    let mut visible: Vec<(usize, Screen)> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| to_screen(s, intr, pose, degree).map(|p| (i, p)))
        .collect();
    visible.sort_by(|a, b| a.1.z.partial_cmp(&b.1.z).unwrap().then(a.0.cmp(&b.0)));

    let n = intr.width * intr.height;
    let mut out = BruteImage {
        rgb: vec![[0.0; 3]; n],
        depth: vec![None; n],
        weight: vec![0.0; n],
    };
    for py in 0..intr.height {
        for px in 0..intr.width {
            let pix = Vector2::new(px as f64, py as f64);
            let mut transmittance = 1.0;
            let mut rgb = [0.0; 3];
            let mut zsum = 0.0;
            let mut wsum = 0.0;
            for (_, s) in &visible {
                let d = pix - s.mean;
                let q = (d.transpose() * s.inv_cov * d)[(0, 0)];
                if q > CUTOFF {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * q).exp();
                let w = alpha * transmittance;
                for c in 0..3 {
                    rgb[c] += w * s.color[c];
                }
                zsum += w * s.z;
                wsum += w;
                transmittance *= 1.0 - alpha;
            }
            let i = py * intr.width + px;
            out.rgb[i] = rgb;
            out.weight[i] = wsum;
            out.depth[i] = (wsum > MIN_WEIGHT).then(|| zsum / wsum);
        }
    }
    out
}
