//! Factorized space-time feature field: six bilinear feature planes per
//! level over the coordinate pairs of `(x, y, z, t)`, multiplied within a
//! level and concatenated across levels.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Axis pairs of the six planes; axis 3 is time.
pub const PLANES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlaneLevel {
    pub spatial: usize,
    pub temporal: usize,
}

impl HexPlaneLevel {
    fn res(&self, axis: usize) -> usize {
        if axis == 3 {
            self.temporal
        } else {
            self.spatial
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlane {
    pub features: usize,
    pub levels: Vec<HexPlaneLevel>,
    /// Query box; positions are normalized to `[0, 1]³` inside it.
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// All planes back to back, each stored `[i_a][i_b][feature]`.
    pub data: Vec<f64>,
}

/// Where one plane lookup landed, for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Tap {
    base: [usize; 4],
    fa: f64,
    fb: f64,
    scale_a: f64,
    scale_b: f64,
    axes: (usize, usize),
}

/// Intermediate values of a query.
#[derive(Clone, Debug)]
pub struct HexPlaneCache {
    taps: Vec<Tap>,
    /// Plane values per level and plane, `F` each.
    values: Vec<f64>,
    /// d(normalized coordinate)/d(world coordinate), 0 where clamped.
    coord_scale: [f64; 3],
}

impl HexPlane {
    /// Spatial planes start uniform in `[0.1, 0.5]`, time planes at 1.
    pub fn new(
        levels: Vec<HexPlaneLevel>,
        features: usize,
        bounds_min: [f64; 3],
        bounds_max: [f64; 3],
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for level in &levels {
            for &(a, b) in &PLANES {
                let n = level.res(a) * level.res(b) * features;
                if b == 3 {
                    data.extend(std::iter::repeat_n(1.0, n));
                } else {
                    data.extend((0..n).map(|_| rng.random_range(0.1..0.5)));
                }
            }
        }
        Self {
            features,
            levels,
            bounds_min,
            bounds_max,
            data,
        }
    }

    /// Box around `positions` padded by 10% of its extent on every side.
    pub fn bounds_for(positions: &[Vector3<f64>]) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for a in 0..3 {
            if !lo[a].is_finite() {
                lo[a] = -1.0;
                hi[a] = 1.0;
            }
            let pad = 0.1 * (hi[a] - lo[a]).max(1e-3);
            lo[a] -= pad;
            hi[a] += pad;
        }
        (lo, hi)
    }

    pub fn output_dim(&self) -> usize {
        self.features * self.levels.len()
    }

    fn plane_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels.len() * 6);
        let mut off = 0;
        for level in &self.levels {
            for &(a, b) in &PLANES {
                out.push(off);
                off += level.res(a) * level.res(b) * self.features;
            }
        }
        out
    }

    /// Feature vector at world position `x` and time `t`.
    pub fn query(&self, x: &Vector3<f64>, t: f64) -> (Vec<f64>, HexPlaneCache) {
        let mut coord = [0.0; 4];
        let mut coord_scale = [0.0; 3];
        for a in 0..3 {
            let ext = self.bounds_max[a] - self.bounds_min[a];
            let u = (x[a] - self.bounds_min[a]) / ext;
            if u > 0.0 && u < 1.0 {
                coord_scale[a] = 1.0 / ext;
            }
            coord[a] = u.clamp(0.0, 1.0);
        }
        coord[3] = t.clamp(0.0, 1.0);

        let f = self.features;
        let offsets = self.plane_offsets();
        let mut taps = Vec::with_capacity(offsets.len());
        let mut values = vec![0.0; offsets.len() * f];
        let mut out = vec![1.0; self.output_dim()];
        for (l, level) in self.levels.iter().enumerate() {
            for (p, &(a, b)) in PLANES.iter().enumerate() {
                let (ra, rb) = (level.res(a), level.res(b));
                let (ia, fa) = cell(coord[a], ra);
                let (ib, fb) = cell(coord[b], rb);
                let off = offsets[l * 6 + p];
                let idx = |i: usize, j: usize| off + (i * rb + j) * f;
                let base = [
                    idx(ia, ib),
                    idx(ia + 1, ib),
                    idx(ia, ib + 1),
                    idx(ia + 1, ib + 1),
                ];
                let w = [
                    (1.0 - fa) * (1.0 - fb),
                    fa * (1.0 - fb),
                    (1.0 - fa) * fb,
                    fa * fb,
                ];
                let v = &mut values[(l * 6 + p) * f..(l * 6 + p + 1) * f];
                for (c, vc) in v.iter_mut().enumerate() {
                    *vc = w[0] * self.data[base[0] + c]
                        + w[1] * self.data[base[1] + c]
                        + w[2] * self.data[base[2] + c]
                        + w[3] * self.data[base[3] + c];
                    out[l * f + c] *= *vc;
                }
                taps.push(Tap {
                    base,
                    fa,
                    fb,
                    scale_a: (ra - 1) as f64,
                    scale_b: (rb - 1) as f64,
                    axes: (a, b),
                });
            }
        }
        (
            out,
            HexPlaneCache {
                taps,
                values,
                coord_scale,
            },
        )
    }

    /// Accumulates the gradient of the grids into `grad` and returns the
    /// gradient with respect to the query position.
    pub fn backward(&self, cache: &HexPlaneCache, d_out: &[f64], grad: &mut [f64]) -> Vector3<f64> {
        let f = self.features;
        let mut d_coord = [0.0; 4];
        for l in 0..self.levels.len() {
            for p in 0..6 {
                let tap = &cache.taps[l * 6 + p];
                let w = [
                    (1.0 - tap.fa) * (1.0 - tap.fb),
                    tap.fa * (1.0 - tap.fb),
                    (1.0 - tap.fa) * tap.fb,
                    tap.fa * tap.fb,
                ];
                for c in 0..f {
                    let mut others = 1.0;
                    for q in 0..6 {
                        if q != p {
                            others *= cache.values[(l * 6 + q) * f + c];
                        }
                    }
                    let dv = d_out[l * f + c] * others;
                    if dv == 0.0 {
                        continue;
                    }
                    for k in 0..4 {
                        grad[tap.base[k] + c] += w[k] * dv;
                    }
                    let v = |k: usize| self.data[tap.base[k] + c];
                    let dfa = (1.0 - tap.fb) * (v(1) - v(0)) + tap.fb * (v(3) - v(2));
                    let dfb = (1.0 - tap.fa) * (v(2) - v(0)) + tap.fa * (v(3) - v(1));
                    d_coord[tap.axes.0] += dv * dfa * tap.scale_a;
                    d_coord[tap.axes.1] += dv * dfb * tap.scale_b;
                }
            }
        }
        Vector3::new(
            d_coord[0] * cache.coord_scale[0],
            d_coord[1] * cache.coord_scale[1],
            d_coord[2] * cache.coord_scale[2],
        )
    }
}

/// Lower cell index and fraction of normalized coordinate `u` on `res` nodes.
fn cell(u: f64, res: usize) -> (usize, f64) {
    let g = u * (res - 1) as f64;
    let i = (g.floor() as usize).min(res - 2);
    (i, g - i as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HexPlane {
        let levels = vec![
            HexPlaneLevel {
                spatial: 4,
                temporal: 3,
            },
            HexPlaneLevel {
                spatial: 6,
                temporal: 5,
            },
        ];
        let mut h = HexPlane::new(levels, 3, [-1.0; 3], [1.0; 3], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut h.data {
            *v = rng.random_range(-1.0..1.0);
        }
        h
    }

    #[test]
    fn nodes_are_reproduced_exactly() {
        let h = small();
        // Node (i, j) of level 0 plane (x, y) at t where time planes are 1.
        let mut flat = h.clone();
        let offs = flat.plane_offsets();
        for p in 3..6 {
            let len = 4 * 3 * 3;
            flat.data[offs[p]..offs[p] + len]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
        let x = Vector3::new(-1.0 + 2.0 / 3.0, 1.0 / 3.0, -1.0);
        let (feat, _) = flat.query(&x, 0.5);
        let at = |p: usize, i: usize, j: usize, c: usize| flat.data[offs[p] + (i * 4 + j) * 3 + c];
        for c in 0..3 {
            let want = at(0, 1, 2, c) * at(1, 1, 0, c) * at(2, 2, 0, c);
            assert!((feat[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_differences() {
        let h = small();
        let x = Vector3::new(0.13, -0.41, 0.77);
        let t = 0.37;
        let (feat, cache) = h.query(&x, t);
        let d_out: Vec<f64> = (0..feat.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let loss = |h: &HexPlane, x: &Vector3<f64>| {
            h.query(x, t)
                .0
                .iter()
                .zip(&d_out)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut grad = vec![0.0; h.data.len()];
        let dx = h.backward(&cache, &d_out, &mut grad);
        let eps = 1e-6;
        for a in 0..3 {
            let (mut p, mut m) = (x, x);
            p[a] += eps;
            m[a] -= eps;
            let fd = (loss(&h, &p) - loss(&h, &m)) / (2.0 * eps);
            assert!((fd - dx[a]).abs() < 1e-7, "axis {a}: {fd} vs {}", dx[a]);
        }
        let touched: Vec<usize> = (0..grad.len()).filter(|i| grad[*i] != 0.0).collect();
        assert!(!touched.is_empty());
        for &i in touched.iter().step_by(7) {
            let (mut p, mut m) = (h.clone(), h.clone());
            p.data[i] += eps;
            m.data[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn clamped_outside_the_box() {
        let h = small();
        let (a, cache) = h.query(&Vector3::new(5.0, 0.0, 0.0), 0.2);
        let (b, _) = h.query(&Vector3::new(1.0, 0.0, 0.0), 0.2);
        assert_eq!(a, b);
        let mut grad = vec![0.0; h.data.len()];
        let dx = h.backward(&cache, &vec![1.0; a.len()], &mut grad);
        assert_eq!(dx.x, 0.0);
    }

    #[test]
    fn default_init_ranges() {
        let h = HexPlane::new(
            vec![HexPlaneLevel {
                spatial: 8,
                temporal: 4,
            }],
            2,
            [0.0; 3],
            [1.0; 3],
            1,
        );
        let offs = h.plane_offsets();
        assert!(h.data[..offs[3]].iter().all(|v| (0.1..0.5).contains(v)));
        assert!(h.data[offs[3]..].iter().all(|v| *v == 1.0));
    }
}
