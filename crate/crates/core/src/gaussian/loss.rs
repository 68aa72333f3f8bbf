//! Masked photometric and inverse-depth losses, neighbor rigidity, and their
//! gradients.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{DepthMap, ImagePlane, RegionMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub depth: f64,
    pub rigidity: f64,
    /// Weight of the 1-norm embedding regularizer.
    pub embedding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            rigidity: 1.0,
            embedding: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub depth: f64,
    pub rigidity: f64,
    pub embedding: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(rgb: f64, depth: f64, rigidity: f64, embedding: f64, w: &LossWeights) -> Self {
        Self {
            rgb,
            depth,
            rigidity,
            embedding,
            total: rgb + w.depth * depth + w.rigidity * rigidity + w.embedding * embedding,
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

/// `Σ_p M_p Σ_c |Ĩ − I|`.
pub fn loss_rgb(render: &ImagePlane, target: &ImagePlane, mask: &RegionMask) -> f64 {
    rgb_loss_grad(render, target, mask).0
}

/// `Σ_p M_p |D̃⁻¹ − D⁻¹|` over pixels where both depths are valid.
pub fn loss_depth(render: &DepthMap, target: &DepthMap, mask: &RegionMask) -> f64 {
    depth_loss_grad(render, target, mask).0
}

pub(crate) fn rgb_loss_grad(
    render: &ImagePlane,
    target: &ImagePlane,
    mask: &RegionMask,
) -> (f64, Vec<[f64; 3]>) {
    let mut loss = 0.0;
    let grad = render
        .rgb
        .iter()
        .zip(&target.rgb)
        .zip(&mask.weights)
        .map(|((r, t), m)| {
            let mut g = [0.0; 3];
            if *m != 0.0 {
                for c in 0..3 {
                    let d = r[c] - t[c];
                    loss += m * d.abs();
                    g[c] = m * sign(d);
                }
            }
            g
        })
        .collect();
    (loss, grad)
}

pub(crate) fn depth_loss_grad(
    render: &DepthMap,
    target: &DepthMap,
    mask: &RegionMask,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; render.values.len()];
    for i in 0..grad.len() {
        let m = mask.weights[i];
        if m == 0.0 || !render.valid[i] || !target.valid[i] {
            continue;
        }
        let (dr, dt) = (render.values[i], target.values[i]);
        let d = 1.0 / dr - 1.0 / dt;
        loss += m * d.abs();
        grad[i] = m * sign(d) * (-1.0 / (dr * dr));
    }
    (loss, grad)
}

/// Undirected k-nearest-neighbor edges, each stored once with `i < j`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub edges: Vec<(usize, usize)>,
}

/// Links every point to its `k` nearest others (ties to the lower index).
pub fn knn_graph(positions: &[Vector3<f64>], k: usize) -> NeighborGraph {
    let n = positions.len();
    let mut edges = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((positions[i] - positions[j]).norm_squared(), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in d.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    NeighborGraph {
        edges: edges.into_iter().collect(),
    }
}

/// `Σ_(i,j) ‖Δxᵢ − Δxⱼ‖²` over graph edges.
pub fn loss_rigidity(dx: &[Vector3<f64>], graph: &NeighborGraph) -> f64 {
    rigidity_grad(dx, graph).0
}

pub(crate) fn rigidity_grad(
    dx: &[Vector3<f64>],
    graph: &NeighborGraph,
) -> (f64, Vec<Vector3<f64>>) {
    let mut grad = vec![Vector3::zeros(); dx.len()];
    let mut loss = 0.0;
    for &(i, j) in &graph.edges {
        let d = dx[i] - dx[j];
        loss += d.norm_squared();
        grad[i] += 2.0 * d;
        grad[j] -= 2.0 * d;
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_examples() {
        let a = ImagePlane::filled(3, 2, [0.2, 0.4, 0.6]);
        let b = ImagePlane::filled(3, 2, [0.3, 0.4, 0.5]);
        assert_eq!(loss_rgb(&a, &a, &RegionMask::ones(3, 2)), 0.0);
        assert_eq!(loss_rgb(&a, &b, &RegionMask::zeros(3, 2)), 0.0);
        let l = loss_rgb(&a, &b, &RegionMask::filled(3, 2, 0.5));
        assert!((l - 6.0 * 0.5 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn depth_examples() {
        let r = DepthMap::from_values(1, 1, vec![1.0]);
        let t = DepthMap::from_values(1, 1, vec![0.5]);
        assert_eq!(loss_depth(&r, &t, &RegionMask::ones(1, 1)), 1.0);
        assert_eq!(loss_depth(&r, &r, &RegionMask::ones(1, 1)), 0.0);
        assert_eq!(loss_depth(&r, &t, &RegionMask::zeros(1, 1)), 0.0);
        assert_eq!(
            loss_depth(&DepthMap::invalid(1, 1), &t, &RegionMask::ones(1, 1)),
            0.0
        );
    }

    #[test]
    fn rigidity_examples() {
        let graph = NeighborGraph {
            edges: vec![(0, 1)],
        };
        let uniform = vec![Vector3::new(0.3, -0.1, 0.2); 2];
        assert_eq!(loss_rigidity(&uniform, &graph), 0.0);
        let dx = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()];
        assert_eq!(loss_rigidity(&dx, &graph), 1.0);
        assert_eq!(loss_rigidity(&dx, &NeighborGraph::default()), 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights {
            depth: 2.0,
            rigidity: 0.5,
            embedding: 0.1,
        };
        let t = LossTerms::new(1.0, 2.0, 4.0, 10.0, &w);
        assert_eq!(t.total, 1.0 + 4.0 + 2.0 + 1.0);
        assert_eq!(LossTerms::new(0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
    }

    #[test]
    fn knn_is_symmetric_and_deduplicated() {
        let pts: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let g = knn_graph(&pts, 1);
        assert_eq!(g.edges, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        assert!(knn_graph(&pts, 0).edges.is_empty());
        assert!(knn_graph(&[], 3).edges.is_empty());
    }
}
