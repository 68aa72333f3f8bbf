//! Central finite differences of the 4D training objective, evaluated with
//! the brute-force renderer and losses written out here.

use forge_core::gaussian::{
    LossWeights, NeighborGraph, ParamClass, Scene4D, Scene4DGrad, TrainView,
};
use forge_core::geometry::CameraIntrinsics;
use rand::seq::SliceRandom;
use rand::Rng;

use super::render::brute_render;

/// Objective of one frame: masked L1 color, masked L1 inverse depth where
/// both depths exist, squared neighbor offsets of the position deformation,
/// and the 1-norm of every embedding when a video is selected.
pub fn objective(
    scene: &Scene4D,
    intr: &CameraIntrinsics,
    view: &TrainView,
    video: Option<usize>,
    weights: &LossWeights,
    graph: &NeighborGraph,
) -> f64 {
    let e = match video {
        Some(k) => scene.embeddings[k].clone(),
        None => vec![0.0; scene.embedding_dim()],
    };
    let deformed = scene.deform_all(view.time, &e);
    let img = brute_render(&deformed, intr, &view.pose, scene.sh_degree);

    let mut rgb = 0.0;
    let mut depth = 0.0;
    for i in 0..intr.pixel_count() {
        let m = view.mask.weights[i];
        for c in 0..3 {
            rgb += m * (img.rgb[i][c] - view.image.rgb[i][c]).abs();
        }
        if let (Some(d), true) = (img.depth[i], view.depth.valid[i]) {
            depth += m * (1.0 / d - 1.0 / view.depth.values[i]).abs();
        }
    }
    let offsets: Vec<_> = scene
        .splats
        .iter()
        .zip(&deformed)
        .map(|(a, b)| b.position - a.position)
        .collect();
    let rigidity: f64 = graph
        .edges
        .iter()
        .map(|&(i, j)| (offsets[i] - offsets[j]).norm_squared())
        .sum();
    let embedding: f64 = if video.is_some() {
        scene.embeddings.iter().flatten().map(|v| v.abs()).sum()
    } else {
        0.0
    };
    rgb + weights.depth * depth + weights.rigidity * rigidity + weights.embedding * embedding
}

/// One compared coordinate.
#[derive(Clone, Copy, Debug)]
pub struct GradSample {
    pub class: ParamClass,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Result of checking one parameter class.
#[derive(Clone, Debug, Default)]
pub struct ClassCheck {
    pub samples: Vec<GradSample>,
    /// Coordinates passed over because the objective is not differentiable
    /// within one step of them.
    pub skipped_kinks: usize,
}

pub struct FdSettings {
    pub step: f64,
    pub per_class: usize,
    /// Coordinates with a smaller analytic gradient are not sampled.
    pub min_gradient: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            per_class: 12,
            min_gradient: 1e-3,
        }
    }
}

/// Compares `grad` against central differences of `f` on up to
/// `per_class` random coordinates of `class`.
///
/// A coordinate is a kink when the forward and backward one-sided slopes
/// disagree by more than 1e-3 relative; such points have no derivative to
/// compare and another coordinate is drawn.
pub fn check_class(
    scene: &Scene4D,
    grad: &Scene4DGrad,
    class: ParamClass,
    settings: &FdSettings,
    rng: &mut impl Rng,
    f: impl Fn(&Scene4D) -> f64,
) -> ClassCheck {
    let mut candidates: Vec<usize> = (0..scene.param_count(class))
        .filter(|&i| grad.get(class, i).abs() >= settings.min_gradient)
        .collect();
    candidates.shuffle(rng);
    let base = f(scene);
    let mut out = ClassCheck::default();
    let mut probe = scene.clone();
    for i in candidates {
        if out.samples.len() >= settings.per_class {
            break;
        }
        let h = settings.step;
        let x = scene.param(class, i);
        *probe.param_mut(class, i) = x + h;
        let up = f(&probe);
        *probe.param_mut(class, i) = x - h;
        let down = f(&probe);
        *probe.param_mut(class, i) = x;
        let (fwd, bwd) = ((up - base) / h, (base - down) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
            out.skipped_kinks += 1;
            continue;
        }
        out.samples.push(GradSample {
            class,
            index: i,
            analytic: grad.get(class, i),
            numeric: (up - down) / (2.0 * h),
        });
    }
    out
}
