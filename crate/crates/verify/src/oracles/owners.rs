//! Owner selection and border crossfade by exhaustive search.

use forge_core::visibility::ViewStats;

/// Every video attaining the maximum score, lowest index first.
pub fn brute_owner(stats: &[ViewStats], point: usize, beta: f64) -> Option<usize> {
    let scores: Vec<Option<f64>> = stats.iter().map(|s| s.score(point, beta)).collect();
    let best = scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    scores.iter().position(|s| *s == Some(best))
}

/// Crossfade weights with distances taken over the whole image.
pub fn brute_soft_weights(
    owners: &[Option<usize>],
    width: usize,
    videos: usize,
    band: f64,
) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; owners.len()]; videos];
    let band = band.max(0.0);
    for (p, own) in owners.iter().enumerate() {
        let Some(own) = *own else { continue };
        let (px, py) = ((p % width) as f64, (p / width) as f64);
        let mut shares = vec![0.0; videos];
        for (k, share) in shares.iter_mut().enumerate() {
            if k == own {
                continue;
            }
            let nearest = owners
                .iter()
                .enumerate()
                .filter(|(_, o)| **o == Some(k))
                .map(|(q, _)| {
                    let (qx, qy) = ((q % width) as f64, (q / width) as f64);
                    ((qx - px).powi(2) + (qy - py).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if nearest <= band {
                *share = (band + 1.0 - nearest) / (2.0 * (band + 1.0));
            }
        }
        let total: f64 = shares.iter().sum();
        if total > 0.5 {
            shares.iter_mut().for_each(|s| *s *= 0.5 / total);
        }
        let rest: f64 = shares.iter().sum();
        shares[own] = 1.0 - rest;
        for k in 0..videos {
            out[k][p] = shares[k];
        }
    }
    out
}
