//! Stage three: anisotropic Gaussian splats, their differentiable rasterizer,
//! the HexPlane deformation field with per-video motion embeddings, and the
//! canonical and 4D training loops.

mod decoder;
mod deform;
mod hexplane;
mod loss;
mod optim;
mod render;
pub mod sh;
mod train;

pub use decoder::{Decoder, DECODER_HIDDEN, DECODER_OUTPUTS};
pub use deform::{
    finalize_embeddings, project_l1_ball, Deformation, ParamClass, Scene4D, Scene4DGrad,
    EMBEDDING_DIM,
};
pub use hexplane::{HexPlane, HexPlaneLevel, PLANES};
pub use loss::{
    knn_graph, loss_depth, loss_rgb, loss_rigidity, LossTerms, LossWeights, NeighborGraph,
};
pub use optim::{LearningRates, RmsProp};
pub use render::{
    project_splat, render, render_backward, Projected, RenderOutput, RenderSettings, ScreenGrad,
    TILE_SIZE,
};
pub use train::{
    canonical_loss_and_grad, canonical_views, fit_splats, init_splats, prune, train_4d,
    train_canonical, CanonicalConfig, TrainConfig4D, TrainView, VideoSet,
};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Floats per splat in flat storage: position 3, quaternion 4 (wxyz), log
/// scale 3, opacity logit 1, SH 48.
pub const SPLAT_FLOATS: usize = 59;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSplat {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`; normalized wherever a rotation is needed.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    #[serde(with = "serde_sh")]
    pub sh: [f64; 48],
}

impl GaussianSplat {
    /// A splat of zeros, also used as a gradient accumulator.
    pub fn zeros() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh: [0.0; 48],
        }
    }

    /// Isotropic splat of flat `color`.
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        let mut sh = [0.0; 48];
        sh[..3].copy_from_slice(&sh::dc_from_color(color));
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }

    /// `Σ = R·diag(s²)·Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = rotation_matrix(&self.rotation);
        let s = self.scale();
        let m = r * Matrix3::from_diagonal(&s);
        m * m.transpose()
    }

    pub fn to_array(&self) -> [f64; SPLAT_FLOATS] {
        let mut a = [0.0; SPLAT_FLOATS];
        a[0..3].copy_from_slice(self.position.as_slice());
        a[3..7].copy_from_slice(&self.rotation);
        a[7..10].copy_from_slice(self.log_scale.as_slice());
        a[10] = self.opacity_logit;
        a[11..].copy_from_slice(&self.sh);
        a
    }

    pub fn from_array(a: &[f64; SPLAT_FLOATS]) -> Self {
        let mut sh = [0.0; 48];
        sh.copy_from_slice(&a[11..]);
        Self {
            position: Vector3::new(a[0], a[1], a[2]),
            rotation: [a[3], a[4], a[5], a[6]],
            log_scale: Vector3::new(a[7], a[8], a[9]),
            opacity_logit: a[10],
            sh,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Adds `other` scaled by `s` field by field.
    pub fn add_scaled(&mut self, other: &GaussianSplat, s: f64) {
        let mut a = self.to_array();
        for (x, y) in a.iter_mut().zip(other.to_array()) {
            *x += s * y;
        }
        *self = Self::from_array(&a);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `q = (w, x, y, z)`.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a loss with respect to the raw quaternion, given its gradient
/// `g` with respect to the rotation matrix built by [`rotation_matrix`].
pub fn rotation_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let u = q.map(|v| v / n);
    let [w, x, y, z] = u;
    // dR/dw, dR/dx, dR/dy, dR/dz at the unit quaternion.
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let gu = [dw, dx, dy, dz].map(|d| d.component_mul(g).sum());
    let dot: f64 = gu.iter().zip(&u).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (gu[i] - u[i] * dot) / n)
}

/// Hamilton product of `(w, x, y, z)` quaternions.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

mod serde_sh {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 48], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 48], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"48 coefficients"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_is_symmetric_positive_definite() {
        let mut s = GaussianSplat::isotropic(Vector3::zeros(), 0.1, 0.5, [0.5; 3]);
        s.rotation = [0.9, 0.2, -0.3, 0.4];
        s.log_scale = Vector3::new(-1.0, -2.0, 0.5);
        let c = s.covariance();
        assert!((c - c.transpose()).norm() < 1e-15);
        let eig = c.symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.scale().iter().map(|v| v * v).collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_gradient_matches_differences() {
        let q = [0.7, -0.2, 0.5, 0.3];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let f = |q: &[f64; 4]| rotation_matrix(q).component_mul(&g).sum();
        let an = rotation_matrix_backward(&q, &g);
        for i in 0..4 {
            let (mut p, mut m) = (q, q);
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - an[i]).abs() < 1e-8, "{i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn quaternion_product_matches_nalgebra() {
        let a = [0.7, -0.2, 0.5, 0.3];
        let b = [0.1, 0.9, -0.4, 0.2];
        let qa = nalgebra::Quaternion::new(a[0], a[1], a[2], a[3]);
        let qb = nalgebra::Quaternion::new(b[0], b[1], b[2], b[3]);
        let p = qa * qb;
        let ours = quat_mul(&a, &b);
        for (x, y) in ours.iter().zip([p.w, p.i, p.j, p.k]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(quat_mul(&a, &[1.0, 0.0, 0.0, 0.0]), a);
    }

    #[test]
    fn flat_round_trip() {
        let mut s =
            GaussianSplat::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.2, 0.7, [0.1, 0.5, 0.9]);
        s.sh[47] = -0.25;
        assert_eq!(GaussianSplat::from_array(&s.to_array()), s);
        assert!((s.opacity() - 0.7).abs() < 1e-12);
    }
}
