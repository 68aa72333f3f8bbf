//! Canonical fitting against point-cloud renders, then joint 4D fitting
//! against the animated videos under visibility masks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::deform::{project_l1_ball, Scene4D, Scene4DGrad, EMBEDDING_DIM};
use super::hexplane::HexPlaneLevel;
use super::loss::{depth_loss_grad, knn_graph, rgb_loss_grad, LossTerms, LossWeights};
use super::optim::{LearningRates, RmsProp};
use super::render::{render, render_backward, RenderSettings};
use super::{GaussianSplat, SPLAT_FLOATS};
use crate::error::{Error, Result};
use crate::geometry::{
    render_pointcloud, CameraIntrinsics, CameraPose, DepthMap, ImagePlane, PointCloud, RegionMask,
};

/// One supervised frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub pose: CameraPose,
    pub time: f64,
    pub image: ImagePlane,
    pub depth: DepthMap,
    pub mask: RegionMask,
}

/// Supervision for 4D fitting: `views[k][j]` is frame `j` of video `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoSet {
    pub views: Vec<Vec<TrainView>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanonicalConfig {
    pub iterations: usize,
    /// Upper bound on the initial splat count; 0 keeps every point.
    pub max_splats: usize,
    pub init_opacity: f64,
    /// Neighbors averaged for the initial isotropic scale.
    pub scale_neighbors: usize,
    pub prune_every: usize,
    pub prune_opacity: f64,
    pub lambda_depth: f64,
    pub sh_degree: usize,
    pub learning_rates: LearningRates,
    pub seed: u64,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            max_splats: 0,
            init_opacity: 0.9,
            scale_neighbors: 3,
            prune_every: 500,
            prune_opacity: 0.005,
            lambda_depth: 1.0,
            sh_degree: 3,
            learning_rates: LearningRates::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig4D {
    pub iterations: usize,
    pub levels: Vec<HexPlaneLevel>,
    pub features: usize,
    pub embedding_dim: usize,
    pub embedding_bound: f64,
    pub embedding_init_std: f64,
    /// When false the embeddings stay at zero: the single-embedding ablation.
    pub use_embeddings: bool,
    pub decoder_hidden: usize,
    pub weights: LossWeights,
    pub rigidity_neighbors: usize,
    /// Every this many iterations the canonical splats also take a step on a
    /// point-cloud render; 0 disables it.
    pub canonical_every: usize,
    pub checkpoint_every: usize,
    pub sh_degree: usize,
    pub learning_rates: LearningRates,
    pub seed: u64,
}

impl Default for TrainConfig4D {
    fn default() -> Self {
        Self {
            iterations: 15000,
            levels: vec![
                HexPlaneLevel {
                    spatial: 32,
                    temporal: 16,
                },
                HexPlaneLevel {
                    spatial: 64,
                    temporal: 25,
                },
            ],
            features: 16,
            embedding_dim: EMBEDDING_DIM,
            embedding_bound: 1.0,
            embedding_init_std: 0.1,
            use_embeddings: true,
            decoder_hidden: super::DECODER_HIDDEN,
            weights: LossWeights::default(),
            rigidity_neighbors: 8,
            canonical_every: 4,
            checkpoint_every: 1000,
            sh_degree: 3,
            learning_rates: LearningRates::default(),
            seed: 0,
        }
    }
}

/// Point-cloud renders at `poses`, used to supervise the canonical splats.
pub fn canonical_views(
    cloud: &PointCloud,
    poses: &[CameraPose],
    intr: &CameraIntrinsics,
    splat_radius_px: f64,
) -> Vec<TrainView> {
    poses
        .par_iter()
        .map(|pose| {
            let (image, depth, mask) = render_pointcloud(cloud, intr, pose, splat_radius_px);
            TrainView {
                pose: *pose,
                time: 0.0,
                image,
                depth,
                mask,
            }
        })
        .collect()
}

/// One isotropic splat per point, after farthest-point subsampling to at most
/// `max_splats` (0 = no limit). Scale is the mean distance to the nearest
/// `neighbors` other splats.
pub fn init_splats(
    cloud: &PointCloud,
    max_splats: usize,
    neighbors: usize,
    opacity: f64,
) -> Vec<GaussianSplat> {
    let chosen = if max_splats == 0 || cloud.len() <= max_splats {
        (0..cloud.len()).collect()
    } else {
        farthest_points(&cloud.positions, max_splats)
    };
    let pts: Vec<Vector3<f64>> = chosen.iter().map(|&i| cloud.positions[i]).collect();
    chosen
        .par_iter()
        .enumerate()
        .map(|(n, &i)| {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(m, _)| *m != n)
                .map(|(_, q)| (q - pts[n]).norm())
                .collect();
            let k = neighbors.max(1).min(d.len());
            let scale = if k == 0 {
                0.01
            } else {
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
                let mean = d[..k].iter().sum::<f64>() / k as f64;
                mean.max(1e-6)
            };
            GaussianSplat::isotropic(cloud.positions[i], scale, opacity, cloud.colors[i])
        })
        .collect()
}

/// Greedy farthest-point sampling seeded at index 0; returns sorted indices.
fn farthest_points(pts: &[Vector3<f64>], count: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = pts.iter().map(|p| (p - pts[0]).norm_squared()).collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..pts.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (d, p) in dist.iter_mut().zip(pts) {
            *d = d.min((p - pts[best]).norm_squared());
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Keep-flags of splats whose opacity reaches `threshold`.
pub fn prune(splats: &[GaussianSplat], threshold: f64) -> Vec<bool> {
    splats.iter().map(|s| s.opacity() >= threshold).collect()
}

/// Loss of the undeformed splats on `view` and its gradient.
pub fn canonical_loss_and_grad(
    splats: &[GaussianSplat],
    intr: &CameraIntrinsics,
    view: &TrainView,
    lambda_depth: f64,
    settings: &RenderSettings,
) -> (LossTerms, Vec<GaussianSplat>) {
    let out = render(splats, intr, &view.pose, settings);
    let (rgb, g_rgb) = rgb_loss_grad(&out.image, &view.image, &view.mask);
    let (depth, mut g_depth) = depth_loss_grad(&out.depth, &view.depth, &view.mask);
    g_depth.iter_mut().for_each(|g| *g *= lambda_depth);
    let weights = LossWeights {
        depth: lambda_depth,
        rigidity: 0.0,
        embedding: 0.0,
    };
    let grads = render_backward(splats, &out, intr, &view.pose, settings, &g_rgb, &g_depth);
    (LossTerms::new(rgb, depth, 0.0, 0.0, &weights), grads)
}

fn flatten(splats: &[GaussianSplat]) -> Vec<f64> {
    splats.iter().flat_map(|s| s.to_array()).collect()
}

fn unflatten(flat: &[f64]) -> Vec<GaussianSplat> {
    flat.chunks_exact(SPLAT_FLOATS)
        .map(|c| GaussianSplat::from_array(c.try_into().expect("chunk of record size")))
        .collect()
}

fn normalize_rotations(splats: &mut [GaussianSplat]) {
    for s in splats {
        let n = s.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            s.rotation = s.rotation.map(|v| v / n);
        }
    }
}

/// Fits splats initialized from `cloud` to `views`.
pub fn train_canonical(
    cloud: &PointCloud,
    views: &[TrainView],
    intr: &CameraIntrinsics,
    cfg: &CanonicalConfig,
) -> Result<Vec<GaussianSplat>> {
    let splats = init_splats(cloud, cfg.max_splats, cfg.scale_neighbors, cfg.init_opacity);
    fit_splats(splats, views, intr, cfg)
}

/// The optimization loop of [`train_canonical`] from given splats.
pub fn fit_splats(
    mut splats: Vec<GaussianSplat>,
    views: &[TrainView],
    intr: &CameraIntrinsics,
    cfg: &CanonicalConfig,
) -> Result<Vec<GaussianSplat>> {
    if cfg.iterations == 0 {
        return Ok(splats);
    }
    if views.is_empty() {
        return Err(Error::contract(
            "canonical training needs at least one view",
        ));
    }
    let settings = RenderSettings {
        sh_degree: cfg.sh_degree,
    };
    let lr = cfg.learning_rates.splat_record();
    let mut opt = RmsProp::new(splats.len() * SPLAT_FLOATS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for it in 1..=cfg.iterations {
        let view = &views[rng.random_range(0..views.len())];
        let (terms, grads) =
            canonical_loss_and_grad(&splats, intr, view, cfg.lambda_depth, &settings);
        let mut flat = flatten(&splats);
        opt.step(&mut flat, &flatten(&grads), |i| lr[i % SPLAT_FLOATS]);
        splats = unflatten(&flat);
        normalize_rotations(&mut splats);
        if cfg.prune_every > 0 && it % cfg.prune_every == 0 {
            let keep = prune(&splats, cfg.prune_opacity);
            opt.retain_chunks(SPLAT_FLOATS, &keep);
            let before = splats.len();
            splats = splats
                .into_iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(s, _)| s)
                .collect();
            log::debug!("canonical {it}: pruned {} splats", before - splats.len());
        }
        if it % 100 == 0 {
            log::debug!(
                "canonical {it}: loss {:.4} (rgb {:.4}, depth {:.4})",
                terms.total,
                terms.rgb,
                terms.depth
            );
        }
    }
    Ok(splats)
}

struct Optimizers {
    splats: RmsProp,
    field: RmsProp,
    decoder: RmsProp,
    embeddings: RmsProp,
}

/// Joint fit of splats, deformation field, decoder and per-video embeddings.
/// `on_checkpoint` runs every `cfg.checkpoint_every` iterations.
pub fn train_4d(
    splats: Vec<GaussianSplat>,
    videos: &VideoSet,
    canonical: &[TrainView],
    intr: &CameraIntrinsics,
    cfg: &TrainConfig4D,
    on_checkpoint: &mut dyn FnMut(usize, &Scene4D) -> Result<()>,
) -> Result<Scene4D> {
    let k_videos = videos.views.len();
    if k_videos == 0 || videos.views.iter().any(Vec::is_empty) {
        return Err(Error::contract(
            "4D training needs at least one non-empty video",
        ));
    }
    let mut scene = Scene4D::new(
        splats,
        k_videos,
        cfg.levels.clone(),
        cfg.features,
        cfg.embedding_dim,
        cfg.decoder_hidden,
        cfg.seed,
    );
    scene.sh_degree = cfg.sh_degree;
    if cfg.use_embeddings {
        scene.init_embeddings(
            cfg.embedding_init_std,
            cfg.embedding_bound,
            cfg.seed.wrapping_add(2),
        );
    }
    let positions: Vec<Vector3<f64>> = scene.splats.iter().map(|s| s.position).collect();
    let graph = knn_graph(&positions, cfg.rigidity_neighbors);
    let lr = cfg.learning_rates.splat_record();
    let mut opt = Optimizers {
        splats: RmsProp::new(scene.splats.len() * SPLAT_FLOATS),
        field: RmsProp::new(scene.field.data.len()),
        decoder: RmsProp::new(scene.decoder.params.len()),
        embeddings: RmsProp::new(k_videos * cfg.embedding_dim),
    };
    let settings = scene.settings();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    for it in 1..=cfg.iterations {
        let k = rng.random_range(0..k_videos);
        let j = rng.random_range(0..videos.views[k].len());
        let view = &videos.views[k][j];
        let (terms, mut grad) = scene.loss_and_grad(
            intr,
            view,
            cfg.use_embeddings.then_some(k),
            &cfg.weights,
            &graph,
        );
        if cfg.canonical_every > 0 && it % cfg.canonical_every == 0 && !canonical.is_empty() {
            let cv = &canonical[rng.random_range(0..canonical.len())];
            let (_, g) =
                canonical_loss_and_grad(&scene.splats, intr, cv, cfg.weights.depth, &settings);
            for (a, b) in grad.splats.iter_mut().zip(&g) {
                a.add_scaled(b, 1.0);
            }
        }
        apply_step(
            &mut scene,
            &grad,
            &mut opt,
            &lr,
            &cfg.learning_rates,
            cfg.use_embeddings,
        );
        if cfg.use_embeddings {
            for e in &mut scene.embeddings {
                project_l1_ball(e, cfg.embedding_bound);
            }
        }
        if it % 100 == 0 {
            log::debug!(
                "4d {it}: loss {:.4} (rgb {:.4}, depth {:.4}, rigidity {:.5})",
                terms.total,
                terms.rgb,
                terms.depth,
                terms.rigidity
            );
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            on_checkpoint(it, &scene)?;
        }
    }
    Ok(scene)
}

fn apply_step(
    scene: &mut Scene4D,
    grad: &Scene4DGrad,
    opt: &mut Optimizers,
    lr: &[f64; SPLAT_FLOATS],
    rates: &LearningRates,
    embeddings: bool,
) {
    let mut flat = flatten(&scene.splats);
    opt.splats
        .step(&mut flat, &flatten(&grad.splats), |i| lr[i % SPLAT_FLOATS]);
    scene.splats = unflatten(&flat);
    normalize_rotations(&mut scene.splats);
    opt.field
        .step(&mut scene.field.data, &grad.field, |_| rates.hexplane);
    opt.decoder
        .step(&mut scene.decoder.params, &grad.decoder, |_| rates.decoder);
    if embeddings {
        let dim = scene.embedding_dim();
        let mut e: Vec<f64> = scene.embeddings.concat();
        opt.embeddings
            .step(&mut e, &grad.embeddings.concat(), |_| rates.embedding);
        for (dst, src) in scene.embeddings.iter_mut().zip(e.chunks(dim)) {
            dst.copy_from_slice(src);
        }
    }
}
