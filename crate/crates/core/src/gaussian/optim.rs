//! Momentum-free adaptive optimizer with per-class learning rates.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub hexplane: f64,
    pub decoder: f64,
    pub embedding: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 2e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 2.5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 1.25e-4,
            hexplane: 1e-3,
            decoder: 2e-4,
            embedding: 2e-3,
        }
    }
}

impl LearningRates {
    /// Step size of each field of the flat splat record.
    pub fn splat_record(&self) -> [f64; super::SPLAT_FLOATS] {
        let mut lr = [0.0; super::SPLAT_FLOATS];
        lr[0..3].fill(self.position);
        lr[3..7].fill(self.rotation);
        lr[7..10].fill(self.log_scale);
        lr[10] = self.opacity;
        lr[11..14].fill(self.sh_dc);
        lr[14..].fill(self.sh_rest);
        lr
    }
}

/// `v ← ρv + (1 − ρ)g²`, `θ ← θ − lr·g / (√(v / (1 − ρᵗ)) + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

impl RmsProp {
    pub fn new(len: usize) -> Self {
        Self {
            decay: 0.99,
            eps: 1e-12,
            second_moment: vec![0.0; len],
            steps: 0,
        }
    }

    /// One update; `lr(i)` gives the step size of parameter `i`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.second_moment.len());
        assert_eq!(grads.len(), params.len());
        self.steps += 1;
        let correction = 1.0 - self.decay.powi(self.steps.min(i32::MAX as u64) as i32);
        for (i, ((p, g), v)) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.second_moment)
            .enumerate()
        {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            if *g != 0.0 {
                *p -= lr(i) * g / ((*v / correction).sqrt() + self.eps);
            }
        }
    }

    /// Keeps the state of the chunks (of `chunk` parameters) flagged in `keep`.
    pub fn retain_chunks(&mut self, chunk: usize, keep: &[bool]) {
        let old = std::mem::take(&mut self.second_moment);
        self.second_moment = old
            .chunks(chunk)
            .zip(keep)
            .filter(|(_, k)| **k)
            .flat_map(|(c, _)| c.iter().copied())
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = RmsProp::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        opt.step(&mut p, &[4.0, -0.01, 0.0], |_| 0.1);
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] - 1.1).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = RmsProp::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..3000 {
            let g = vec![2.0 * p[0], 20.0 * p[1]];
            opt.step(&mut p, &g, |_| 0.01);
        }
        assert!(p[0].abs() < 0.05 && p[1].abs() < 0.05, "{p:?}");
    }

    #[test]
    fn retain_drops_pruned_state() {
        let mut opt = RmsProp::new(6);
        opt.second_moment = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        opt.retain_chunks(2, &[true, false, true]);
        assert_eq!(opt.second_moment, vec![1.0, 2.0, 5.0, 6.0]);
    }
}
