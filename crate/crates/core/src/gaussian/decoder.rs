//! Deformation decoder: two tanh hidden layers and a linear output split
//! into position, rotation and scale heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DECODER_HIDDEN: usize = 64;
/// Δx (3), Δr (4), Δs (3).
pub const DECODER_OUTPUTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub input: usize,
    pub hidden: usize,
    /// `W1 b1 W2 b2 W3 b3`, row-major weights.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl Decoder {
    /// Hidden layers use Glorot-uniform weights; the output heads start at
    /// zero so the initial deformation vanishes.
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut d = Self {
            input,
            hidden,
            params: Vec::new(),
        };
        let l = d.layout();
        d.params = vec![0.0; l.end];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lim1 = (6.0 / (input + hidden) as f64).sqrt();
        for v in &mut d.params[l.w1..l.b1] {
            *v = rng.random_range(-lim1..lim1);
        }
        let lim2 = (6.0 / (2 * hidden) as f64).sqrt();
        for v in &mut d.params[l.w2..l.b2] {
            *v = rng.random_range(-lim2..lim2);
        }
        d
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.input, self.hidden, DECODER_OUTPUTS);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + o,
        }
    }

    /// Range of the output-head parameters within `params`.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let l = self.layout();
        l.w3..l.end
    }

    pub fn forward(&self, x: &[f64]) -> ([f64; DECODER_OUTPUTS], DecoderCache) {
        assert_eq!(x.len(), self.input);
        let l = self.layout();
        let p = &self.params;
        let h = self.hidden;
        let dense = |w: usize, b: usize, inp: &[f64], rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|r| {
                    let row = &p[w + r * inp.len()..w + (r + 1) * inp.len()];
                    p[b + r] + row.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        };
        let h1: Vec<f64> = dense(l.w1, l.b1, x, h).into_iter().map(f64::tanh).collect();
        let h2: Vec<f64> = dense(l.w2, l.b2, &h1, h)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let o = dense(l.w3, l.b3, &h2, DECODER_OUTPUTS);
        let mut out = [0.0; DECODER_OUTPUTS];
        out.copy_from_slice(&o);
        (
            out,
            DecoderCache {
                x: x.to_vec(),
                h1,
                h2,
            },
        )
    }

    /// Accumulates parameter gradients into `grad`; returns d(loss)/d(input).
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_out: &[f64; DECODER_OUTPUTS],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let l = self.layout();
        let p = &self.params;
        let h = self.hidden;
        let dense_back =
            |w: usize, b: usize, inp: &[f64], d: &[f64], grad: &mut [f64]| -> Vec<f64> {
                let n = inp.len();
                let mut d_in = vec![0.0; n];
                for (r, dr) in d.iter().enumerate() {
                    if *dr == 0.0 {
                        continue;
                    }
                    grad[b + r] += dr;
                    for c in 0..n {
                        grad[w + r * n + c] += dr * inp[c];
                        d_in[c] += dr * p[w + r * n + c];
                    }
                }
                d_in
            };
        let d_h2 = dense_back(l.w3, l.b3, &cache.h2, d_out, grad);
        let d_a2: Vec<f64> = d_h2
            .iter()
            .zip(&cache.h2)
            .map(|(d, y)| d * (1.0 - y * y))
            .collect();
        let d_h1 = dense_back(l.w2, l.b2, &cache.h1, &d_a2, grad);
        let d_a1: Vec<f64> = d_h1
            .iter()
            .zip(&cache.h1)
            .map(|(d, y)| d * (1.0 - y * y))
            .collect();
        debug_assert_eq!(d_a1.len(), h);
        dense_back(l.w1, l.b1, &cache.x, &d_a1, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_heads_give_zero_output() {
        let d = Decoder::new(5, 8, 1);
        let (out, _) = d.forward(&[0.3, -0.2, 0.9, 0.1, 0.5]);
        assert_eq!(out, [0.0; DECODER_OUTPUTS]);
        assert!(d.params[d.head_range()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_differences() {
        let mut d = Decoder::new(5, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in &mut d.params {
            *v = rng.random_range(-0.8..0.8);
        }
        let x = vec![0.3, -0.2, 0.9, 0.1, 0.5];
        let w: [f64; DECODER_OUTPUTS] = std::array::from_fn(|i| (i as f64 + 1.0).cos());
        let loss = |d: &Decoder, x: &[f64]| {
            d.forward(x)
                .0
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = d.forward(&x);
        let mut grad = vec![0.0; d.params.len()];
        let dx = d.backward(&cache, &w, &mut grad);
        let eps = 1e-6;
        for i in (0..d.params.len()).step_by(5) {
            let (mut a, mut b) = (d.clone(), d.clone());
            a.params[i] += eps;
            b.params[i] -= eps;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}");
        }
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss(&d, &a) - loss(&d, &b)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
    }
}
