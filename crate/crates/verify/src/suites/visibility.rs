use std::time::{Duration, Instant};

use forge_core::geometry::{unproject, CameraIntrinsics, CameraPose};
use forge_core::trajectory::interpolate_poses;
use forge_core::visibility::{
    assign_owners, ownership_map, soft_weights, view_stats_rendered, ViewStats,
};
use forge_core::world::SyntheticWorld;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{brute_owner, brute_soft_weights};
use crate::CriterionReport;

pub const NAME: &str = "visibility";

/// Per point and video: unseen, or one of three distances and two angles.
/// The values are chosen so that distinct states can score exactly equal.
const STATES: [Option<(f64, f64)>; 7] = [
    None,
    Some((1.0, 0.5)),
    Some((1.0, 1.0)),
    Some((2.0, 0.5)),
    Some((2.0, 1.0)),
    Some((4.0, 0.5)),
    Some((4.0, 1.0)),
];

fn stats_from(columns: &[Vec<Option<(f64, f64)>>]) -> Vec<ViewStats> {
    columns
        .iter()
        .map(|col| ViewStats {
            ray_length: col.iter().map(|s| s.map(|v| v.0)).collect(),
            angle_score: col.iter().map(|s| s.map(|v| v.1)).collect(),
        })
        .collect()
}

/// Mismatches between the engine and the exhaustive argmax.
fn owner_mismatches(stats: &[ViewStats], beta: f64) -> usize {
    let assign = assign_owners(stats, beta);
    let n = stats.first().map_or(0, |s| s.ray_length.len());
    let videos = stats.len();
    (0..n)
        .filter(|&i| {
            let want = brute_owner(stats, i, beta);
            let mut w = vec![0.0; videos];
            if let Some(k) = want {
                w[k] = 1.0;
            }
            assign.owner[i] != want || assign.weights[i] != w
        })
        .count()
}

/// Voronoi-like owner map with unowned cells.
fn random_owner_map(rng: &mut impl Rng, w: usize, h: usize, videos: usize) -> Vec<Option<usize>> {
    let sites: Vec<(f64, f64, Option<usize>)> = (0..rng.random_range(2..9))
        .map(|_| {
            let label = (!rng.random_bool(0.2)).then(|| rng.random_range(0..videos));
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                label,
            )
        })
        .collect();
    (0..w * h)
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                    let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                    da.total_cmp(&db)
                })
                .and_then(|s| s.2)
        })
        .collect()
}

pub fn visibility_suite(seed: u64) -> CriterionReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = 1.0;

    // Owner choice is independent per point, so enumerating every joint
    // state of one point over 1..=4 videos covers every instance over the
    // state alphabet, whatever the point count.
    let mut enumerated = 0;
    let mut mismatches = 0;
    for videos in 1..=4usize {
        let combos = STATES.len().pow(videos as u32);
        let mut columns = vec![Vec::with_capacity(combos); videos];
        for c in 0..combos {
            let mut rest = c;
            for col in columns.iter_mut() {
                col.push(STATES[rest % STATES.len()]);
                rest /= STATES.len();
            }
        }
        enumerated += combos;
        mismatches += owner_mismatches(&stats_from(&columns), beta);
    }
    // Random instances up to 10 points, half from the alphabet and half
    // continuous, plus a few other β values.
    let mut random_instances = 0;
    for _ in 0..4000 {
        let videos = rng.random_range(1..=4);
        let points = rng.random_range(1..=10);
        let discrete = rng.random_bool(0.5);
        let columns: Vec<Vec<_>> = (0..videos)
            .map(|_| {
                (0..points)
                    .map(|_| {
                        if discrete {
                            STATES[rng.random_range(0..STATES.len())]
                        } else if rng.random_bool(0.2) {
                            None
                        } else {
                            Some((rng.random_range(0.2..5.0), rng.random_range(0.1..1.0)))
                        }
                    })
                    .collect()
            })
            .collect();
        let b = [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        mismatches += owner_mismatches(&stats_from(&columns), b);
        random_instances += 1;
    }

    // Hard masks partition the covered pixels; soft bands sum to one there
    // and match the whole-image crossfade.
    let mut partition_bad = 0;
    let mut sum_gap = 0.0f64;
    let mut soft_gap = 0.0f64;
    let (w, h) = (24, 20);
    let mut maps: Vec<(Vec<Option<usize>>, usize)> = (0..30)
        .map(|_| {
            let videos = rng.random_range(1..=4);
            (random_owner_map(&mut rng, w, h, videos), videos)
        })
        .collect();
    maps.extend(scene_owner_maps(w, h));
    for (owners, videos) in &maps {
        let hard = soft_weights(owners, w, h, *videos, 0.0);
        for (p, own) in owners.iter().enumerate() {
            for (k, layer) in hard.iter().enumerate() {
                let want = if *own == Some(k) { 1.0 } else { 0.0 };
                if layer[p] != want {
                    partition_bad += 1;
                }
            }
        }
        for band in [1.0, 2.5, 4.0, 8.0, 16.0] {
            let soft = soft_weights(owners, w, h, *videos, band);
            let brute = brute_soft_weights(owners, w, *videos, band);
            for (p, own) in owners.iter().enumerate() {
                let total: f64 = soft.iter().map(|l| l[p]).sum();
                let want = if own.is_some() { 1.0 } else { 0.0 };
                sum_gap = sum_gap.max((total - want).abs());
                for k in 0..*videos {
                    soft_gap = soft_gap.max((soft[k][p] - brute[k][p]).abs());
                }
            }
        }
    }

    let ok = mismatches == 0 && partition_bad == 0 && sum_gap < 1e-12 && soft_gap < 1e-12;
    CriterionReport::new(
        NAME,
        ok,
        format!(
            "{enumerated} enumerated + {random_instances} random owner instances, {mismatches} argmax mismatches; {} owner maps: {partition_bad} hard-partition violations, max |Σw − 1| {sum_gap:.1e}, max gap to brute crossfade {soft_gap:.1e}",
            maps.len()
        ),
        start.elapsed(),
        Duration::from_secs(5),
    )
}

/// Owner maps of a real three-video scene seen from each trajectory's end.
fn scene_owner_maps(w: usize, h: usize) -> Vec<(Vec<Option<usize>>, usize)> {
    let world = SyntheticWorld::default();
    let intr = CameraIntrinsics::centered(22.0, w, h).unwrap();
    let (img, depth) = world.render_static(&intr, &CameraPose::identity());
    let cloud = unproject(&img, &depth, &intr, &CameraPose::identity()).unwrap();
    let ends = [
        CameraPose::look_from(Vector3::new(-0.3, 0.0, 0.1), -0.25, 0.0),
        CameraPose::look_from(Vector3::new(0.3, 0.0, 0.1), 0.25, 0.0),
        CameraPose::look_from(Vector3::new(0.0, 0.2, 0.3), 0.0, -0.1),
    ];
    let trajs: Vec<_> = ends
        .iter()
        .map(|e| interpolate_poses(&CameraPose::identity(), e, 5).unwrap())
        .collect();
    let stats: Vec<ViewStats> = trajs
        .iter()
        .map(|t| view_stats_rendered(&cloud, t, &intr, 1.0))
        .collect();
    let assign = assign_owners(&stats, 1.0);
    trajs
        .iter()
        .map(|t| (ownership_map(&cloud, &assign, &intr, t.end(), 1.0), 3))
        .collect()
}
