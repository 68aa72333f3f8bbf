//! The 4D scene: canonical splats deformed per time and per motion embedding,
//! and the analytic gradient of the training objective.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{Decoder, DecoderCache, DECODER_OUTPUTS};
use super::hexplane::{HexPlane, HexPlaneCache, HexPlaneLevel};
use super::loss::{
    depth_loss_grad, rgb_loss_grad, rigidity_grad, LossTerms, LossWeights, NeighborGraph,
};
use super::render::{render, render_backward, RenderOutput, RenderSettings};
use super::train::TrainView;
use super::{quat_mul, GaussianSplat};
use crate::geometry::{CameraIntrinsics, CameraPose};

pub const EMBEDDING_DIM: usize = 16;

/// Offsets added to a canonical splat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub dx: Vector3<f64>,
    /// Quaternion delta: the splat rotation is multiplied by `(1 + Δr₀, Δr₁, Δr₂, Δr₃)`.
    pub dr: [f64; 4],
    pub ds: Vector3<f64>,
}

impl Deformation {
    pub const ZERO: Deformation = Deformation {
        dx: Vector3::new(0.0, 0.0, 0.0),
        dr: [0.0; 4],
        ds: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn from_output(o: &[f64; DECODER_OUTPUTS]) -> Self {
        Self {
            dx: Vector3::new(o[0], o[1], o[2]),
            dr: [o[3], o[4], o[5], o[6]],
            ds: Vector3::new(o[7], o[8], o[9]),
        }
    }

    fn rotation_factor(&self) -> [f64; 4] {
        [1.0 + self.dr[0], self.dr[1], self.dr[2], self.dr[3]]
    }

    /// Position and log-scale shift additively; rotation composes on the
    /// right. The renderer normalizes the resulting quaternion.
    pub fn apply(&self, s: &GaussianSplat) -> GaussianSplat {
        let mut out = s.clone();
        out.position = s.position + self.dx;
        out.log_scale = s.log_scale + self.ds;
        out.rotation = quat_mul(&s.rotation, &self.rotation_factor());
        out
    }
}

/// Trainable parameter groups, for gradient checks and optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamClass {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Sh,
    HexPlane,
    Decoder,
    Embedding,
}

impl ParamClass {
    pub const ALL: [ParamClass; 8] = [
        ParamClass::Position,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::Opacity,
        ParamClass::Sh,
        ParamClass::HexPlane,
        ParamClass::Decoder,
        ParamClass::Embedding,
    ];

    /// Offset and width of a per-splat class in the flat splat record.
    fn splat_slot(self) -> Option<(usize, usize)> {
        match self {
            ParamClass::Position => Some((0, 3)),
            ParamClass::Rotation => Some((3, 4)),
            ParamClass::LogScale => Some((7, 3)),
            ParamClass::Opacity => Some((10, 1)),
            ParamClass::Sh => Some((11, 48)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene4D {
    pub splats: Vec<GaussianSplat>,
    pub field: HexPlane,
    pub decoder: Decoder,
    /// One motion embedding per training video.
    pub embeddings: Vec<Vec<f64>>,
    pub sh_degree: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene4DGrad {
    pub splats: Vec<GaussianSplat>,
    pub field: Vec<f64>,
    pub decoder: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Per-splat forward state kept for the backward pass.
struct SplatEval {
    deformation: Deformation,
    field: HexPlaneCache,
    decoder: DecoderCache,
}

impl Scene4D {
    /// Fresh deformation model around `splats` with zero embeddings.
    pub fn new(
        splats: Vec<GaussianSplat>,
        videos: usize,
        levels: Vec<HexPlaneLevel>,
        features: usize,
        embedding_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let positions: Vec<Vector3<f64>> = splats.iter().map(|s| s.position).collect();
        let (lo, hi) = HexPlane::bounds_for(&positions);
        let field = HexPlane::new(levels, features, lo, hi, seed);
        let decoder = Decoder::new(
            field.output_dim() + embedding_dim,
            hidden,
            seed.wrapping_add(1),
        );
        Self {
            splats,
            field,
            decoder,
            embeddings: vec![vec![0.0; embedding_dim]; videos],
            sh_degree: super::sh::SH_MAX_DEGREE,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.decoder.input - self.field.output_dim()
    }

    pub fn settings(&self) -> RenderSettings {
        RenderSettings {
            sh_degree: self.sh_degree,
        }
    }

    /// Embeddings drawn from `N(0, std²)` and projected into the 1-norm ball.
    pub fn init_embeddings(&mut self, std: f64, bound: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for e in &mut self.embeddings {
            for v in e.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            project_l1_ball(e, bound);
        }
    }

    pub fn global_embedding(&self) -> Vec<f64> {
        finalize_embeddings(&self.embeddings, self.embedding_dim())
    }

    fn eval(&self, s: &GaussianSplat, t: f64, e: &[f64]) -> SplatEval {
        let (mut input, field) = self.field.query(&s.position, t);
        input.extend_from_slice(e);
        let (out, decoder) = self.decoder.forward(&input);
        SplatEval {
            deformation: Deformation::from_output(&out),
            field,
            decoder,
        }
    }

    pub fn deformation(&self, i: usize, t: f64, e: &[f64]) -> Deformation {
        self.eval(&self.splats[i], t, e).deformation
    }

    pub fn deformations(&self, t: f64, e: &[f64]) -> Vec<Deformation> {
        self.splats
            .par_iter()
            .map(|s| self.eval(s, t, e).deformation)
            .collect()
    }

    /// All splats deformed to time `t` under embedding `e`.
    pub fn deform_all(&self, t: f64, e: &[f64]) -> Vec<GaussianSplat> {
        self.splats
            .par_iter()
            .map(|s| self.eval(s, t, e).deformation.apply(s))
            .collect()
    }

    pub fn render(
        &self,
        intr: &CameraIntrinsics,
        pose: &CameraPose,
        t: f64,
        e: &[f64],
    ) -> RenderOutput {
        render(&self.deform_all(t, e), intr, pose, &self.settings())
    }

    pub fn render_canonical(&self, intr: &CameraIntrinsics, pose: &CameraPose) -> RenderOutput {
        render(&self.splats, intr, pose, &self.settings())
    }

    pub fn zero_grad(&self) -> Scene4DGrad {
        Scene4DGrad {
            splats: vec![GaussianSplat::zeros(); self.splats.len()],
            field: vec![0.0; self.field.data.len()],
            decoder: vec![0.0; self.decoder.params.len()],
            embeddings: vec![vec![0.0; self.embedding_dim()]; self.embeddings.len()],
        }
    }

    /// Training objective on one supervised frame of video `video`, or with
    /// a zero embedding when `video` is `None`, and its gradient.
    ///
    /// `L = L_rgb + λ_depth·L_depth + λ_rigidity·L_rigidity + λ_emb·Σₖ‖eₖ‖₁`.
    pub fn loss_and_grad(
        &self,
        intr: &CameraIntrinsics,
        view: &TrainView,
        video: Option<usize>,
        weights: &LossWeights,
        graph: &NeighborGraph,
    ) -> (LossTerms, Scene4DGrad) {
        let zero = vec![0.0; self.embedding_dim()];
        let e = video.map_or(zero.as_slice(), |k| self.embeddings[k].as_slice());
        let evals: Vec<SplatEval> = self
            .splats
            .par_iter()
            .map(|s| self.eval(s, view.time, e))
            .collect();
        let deformed: Vec<GaussianSplat> = self
            .splats
            .iter()
            .zip(&evals)
            .map(|(s, ev)| ev.deformation.apply(s))
            .collect();
        let settings = self.settings();
        let out = render(&deformed, intr, &view.pose, &settings);

        let (rgb, g_rgb) = rgb_loss_grad(&out.image, &view.image, &view.mask);
        let (depth, mut g_depth) = depth_loss_grad(&out.depth, &view.depth, &view.mask);
        g_depth.iter_mut().for_each(|g| *g *= weights.depth);
        let dx: Vec<Vector3<f64>> = evals.iter().map(|ev| ev.deformation.dx).collect();
        let (rigidity, g_rig) = rigidity_grad(&dx, graph);
        let embedding: f64 = match video {
            Some(_) => self.embeddings.iter().flatten().map(|v| v.abs()).sum(),
            None => 0.0,
        };
        let terms = LossTerms::new(rgb, depth, rigidity, embedding, weights);

        let g_deformed = render_backward(
            &deformed, &out, intr, &view.pose, &settings, &g_rgb, &g_depth,
        );
        let mut grad = self.zero_grad();
        for (i, (s, ev)) in self.splats.iter().zip(&evals).enumerate() {
            let gd = &g_deformed[i];
            let gs = &mut grad.splats[i];
            gs.position = gd.position;
            gs.log_scale = gd.log_scale;
            gs.opacity_logit = gd.opacity_logit;
            gs.sh = gd.sh;
            let factor = ev.deformation.rotation_factor();
            gs.rotation = quat_mul_backward_left(&factor, &gd.rotation);
            let d_factor = quat_mul_backward_right(&s.rotation, &gd.rotation);

            let mut d_out = [0.0; DECODER_OUTPUTS];
            let g_dx = gd.position + weights.rigidity * g_rig[i];
            d_out[..3].copy_from_slice(g_dx.as_slice());
            d_out[3..7].copy_from_slice(&d_factor);
            d_out[7..].copy_from_slice(gd.log_scale.as_slice());
            if d_out.iter().all(|v| *v == 0.0) {
                continue;
            }
            let d_in = self
                .decoder
                .backward(&ev.decoder, &d_out, &mut grad.decoder);
            let nf = self.field.output_dim();
            let d_x = self.field.backward(&ev.field, &d_in[..nf], &mut grad.field);
            gs.position += d_x;
            if let Some(k) = video {
                for (g, d) in grad.embeddings[k].iter_mut().zip(&d_in[nf..]) {
                    *g += d;
                }
            }
        }
        if video.is_some() {
            for (g, e) in grad.embeddings.iter_mut().zip(&self.embeddings) {
                for (gv, ev) in g.iter_mut().zip(e) {
                    *gv += weights.embedding * sign(*ev);
                }
            }
        }
        (terms, grad)
    }

    pub fn param_count(&self, class: ParamClass) -> usize {
        match class.splat_slot() {
            Some((_, w)) => w * self.splats.len(),
            None => match class {
                ParamClass::HexPlane => self.field.data.len(),
                ParamClass::Decoder => self.decoder.params.len(),
                ParamClass::Embedding => self.embeddings.len() * self.embedding_dim(),
                _ => unreachable!(),
            },
        }
    }

    pub fn param(&self, class: ParamClass, i: usize) -> f64 {
        if let Some((off, w)) = class.splat_slot() {
            return self.splats[i / w].to_array()[off + i % w];
        }
        match class {
            ParamClass::HexPlane => self.field.data[i],
            ParamClass::Decoder => self.decoder.params[i],
            ParamClass::Embedding => {
                let d = self.embedding_dim();
                self.embeddings[i / d][i % d]
            }
            _ => unreachable!(),
        }
    }

    pub fn param_mut(&mut self, class: ParamClass, i: usize) -> &mut f64 {
        if let Some((off, w)) = class.splat_slot() {
            let s = &mut self.splats[i / w];
            let j = off + i % w;
            return match j {
                0..=2 => &mut s.position[j],
                3..=6 => &mut s.rotation[j - 3],
                7..=9 => &mut s.log_scale[j - 7],
                10 => &mut s.opacity_logit,
                _ => &mut s.sh[j - 11],
            };
        }
        match class {
            ParamClass::HexPlane => &mut self.field.data[i],
            ParamClass::Decoder => &mut self.decoder.params[i],
            ParamClass::Embedding => {
                let d = self.embedding_dim();
                &mut self.embeddings[i / d][i % d]
            }
            _ => unreachable!(),
        }
    }
}

impl Scene4DGrad {
    pub fn get(&self, class: ParamClass, i: usize) -> f64 {
        if let Some((off, w)) = class.splat_slot() {
            return self.splats[i / w].to_array()[off + i % w];
        }
        match class {
            ParamClass::HexPlane => self.field[i],
            ParamClass::Decoder => self.decoder[i],
            ParamClass::Embedding => {
                let d = self.embeddings.first().map_or(1, Vec::len);
                self.embeddings[i / d][i % d]
            }
            _ => unreachable!(),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// For `c = a ⊗ b` with upstream `g = ∂L/∂c`, returns `∂L/∂a`.
fn quat_mul_backward_left(b: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let [w, x, y, z] = *b;
    // c = R(b)·a with R(b) = [[w,-x,-y,-z],[x,w,z,-y],[y,-z,w,x],[z,y,-x,w]].
    [
        w * g[0] + x * g[1] + y * g[2] + z * g[3],
        -x * g[0] + w * g[1] - z * g[2] + y * g[3],
        -y * g[0] + z * g[1] + w * g[2] - x * g[3],
        -z * g[0] - y * g[1] + x * g[2] + w * g[3],
    ]
}

/// For `c = a ⊗ b` with upstream `g = ∂L/∂c`, returns `∂L/∂b`.
fn quat_mul_backward_right(a: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let [w, x, y, z] = *a;
    // c = L(a)·b with L(a) = [[w,-x,-y,-z],[x,w,-z,y],[y,z,w,-x],[z,-y,x,w]].
    [
        w * g[0] + x * g[1] + y * g[2] + z * g[3],
        -x * g[0] + w * g[1] + z * g[2] - y * g[3],
        -y * g[0] - z * g[1] + w * g[2] + x * g[3],
        -z * g[0] + y * g[1] - x * g[2] + w * g[3],
    ]
}

/// Mean of the per-video embeddings: the single embedding used for playback.
pub fn finalize_embeddings(table: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if table.is_empty() {
        return out;
    }
    for e in table {
        for (o, v) in out.iter_mut().zip(e) {
            *o += v;
        }
    }
    let n = table.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Euclidean projection onto `{e : ‖e‖₁ ≤ bound}` by soft thresholding.
pub fn project_l1_ball(e: &mut [f64], bound: f64) {
    let norm: f64 = e.iter().map(|v| v.abs()).sum();
    if norm <= bound {
        return;
    }
    let mut mags: Vec<f64> = e.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - bound) / (j + 1) as f64;
        if *m > t {
            theta = t;
        }
    }
    for v in e.iter_mut() {
        *v = v.signum() * (v.abs() - theta).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels() -> Vec<HexPlaneLevel> {
        vec![HexPlaneLevel {
            spatial: 4,
            temporal: 3,
        }]
    }

    fn scene() -> Scene4D {
        let splats = (0..5)
            .map(|i| {
                let mut s = GaussianSplat::isotropic(
                    Vector3::new(i as f64 * 0.1 - 0.2, 0.05 * i as f64, 2.0 + 0.1 * i as f64),
                    0.05,
                    0.6,
                    [0.2 * i as f64, 0.5, 0.8],
                );
                s.rotation = [0.9, 0.1 * i as f64, -0.2, 0.3];
                s
            })
            .collect();
        Scene4D::new(splats, 2, levels(), 4, 3, 8, 5)
    }

    #[test]
    fn quaternion_product_gradients() {
        let a = [0.7, -0.2, 0.5, 0.3];
        let b = [1.1, 0.4, -0.3, 0.2];
        let g = [0.3, -0.8, 0.6, 0.1];
        let f = |a: &[f64; 4], b: &[f64; 4]| {
            quat_mul(a, b)
                .iter()
                .zip(&g)
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let ga = quat_mul_backward_left(&b, &g);
        let gb = quat_mul_backward_right(&a, &g);
        for i in 0..4 {
            let (mut ap, mut am, mut bp, mut bm) = (a, a, b, b);
            ap[i] += 1e-6;
            am[i] -= 1e-6;
            bp[i] += 1e-6;
            bm[i] -= 1e-6;
            assert!(((f(&ap, &b) - f(&am, &b)) / 2e-6 - ga[i]).abs() < 1e-9);
            assert!(((f(&a, &bp) - f(&a, &bm)) / 2e-6 - gb[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_heads_leave_splats_canonical() {
        let s = scene();
        let intr = CameraIntrinsics::centered(20.0, 24, 20).unwrap();
        let pose = CameraPose::identity();
        let canonical = s.render_canonical(&intr, &pose);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(s.deform_all(t, &[0.4, -0.1, 0.2]), s.splats);
            let out = s.render(&intr, &pose, t, &[0.0; 3]);
            assert_eq!(out.image, canonical.image);
            assert_eq!(out.depth, canonical.depth);
        }
    }

    #[test]
    fn embeddings_change_the_deformation() {
        let mut s = scene();
        let range = s.decoder.head_range();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 0.1).unwrap();
        for v in &mut s.decoder.params[range] {
            *v = normal.sample(&mut rng);
        }
        let differ = (0..s.splats.len())
            .filter(|&i| {
                s.deformation(i, 0.5, &[0.3, 0.0, 0.0]) != s.deformation(i, 0.5, &[0.0, 0.3, 0.0])
            })
            .count();
        assert_eq!(differ, s.splats.len());
        assert_eq!(
            s.deformation(1, 0.5, &[0.1; 3]),
            s.deformation(1, 0.5, &[0.1; 3])
        );
    }

    #[test]
    fn finalize_examples() {
        assert_eq!(finalize_embeddings(&[vec![0.3, -0.1]], 2), vec![0.3, -0.1]);
        assert_eq!(
            finalize_embeddings(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 3),
            vec![0.5, 0.5, 0.0]
        );
        assert_eq!(finalize_embeddings(&vec![vec![0.0; 4]; 3], 4), vec![0.0; 4]);
        assert_eq!(finalize_embeddings(&[], 2), vec![0.0; 2]);
    }

    #[test]
    fn l1_projection() {
        let mut e = vec![0.5, -0.2, 0.1];
        project_l1_ball(&mut e, 1.0);
        assert_eq!(e, vec![0.5, -0.2, 0.1]);
        let mut e = vec![2.0, -1.0, 0.5, 0.0];
        project_l1_ball(&mut e, 1.0);
        let n: f64 = e.iter().map(|v| v.abs()).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(e, vec![1.0, 0.0, 0.0, 0.0]);
        let mut e = vec![0.6, 0.6];
        project_l1_ball(&mut e, 1.0);
        assert!((e[0] - 0.5).abs() < 1e-12 && (e[1] - 0.5).abs() < 1e-12);
    }
}
