use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use forge_core::gaussian::ParamClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::oracles::{check_class, objective, FdSettings};
use crate::scenes::gradient_case;
use crate::CriterionReport;

pub const NAME: &str = "gradient suite";
pub const TOLERANCE: f64 = 1e-4;

/// Analytic gradients of every parameter class against central differences
/// on `configs` random 4D scenes.
pub fn gradient_suite(configs: usize, seed: u64) -> CriterionReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = FdSettings::default();
    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut kinks = 0usize;
    let mut worst_loss = 0.0f64;
    for _ in 0..configs {
        let case = gradient_case(&mut rng);
        let (terms, grad) = case.scene.loss_and_grad(
            &case.intr,
            &case.view,
            case.video,
            &case.weights,
            &case.graph,
        );
        let f = |s: &_| {
            objective(
                s,
                &case.intr,
                &case.view,
                case.video,
                &case.weights,
                &case.graph,
            )
        };
        worst_loss = worst_loss.max((f(&case.scene) - terms.total).abs());
        for class in ParamClass::ALL {
            let check = check_class(&case.scene, &grad, class, &settings, &mut rng, f);
            kinks += check.skipped_kinks;
            let entry = worst.entry(format!("{class:?}")).or_insert((0.0, 0));
            for s in &check.samples {
                entry.0 = entry.0.max(s.relative_error());
                entry.1 += 1;
            }
        }
    }
    let all_sampled = worst.len() == ParamClass::ALL.len() && worst.values().all(|w| w.1 > 0);
    let max_rel = worst.values().map(|w| w.0).fold(0.0, f64::max);
    let ok = configs >= 50 && all_sampled && max_rel < TOLERANCE && worst_loss < 1e-9;
    let per_class: Vec<String> = worst
        .iter()
        .map(|(k, (e, n))| format!("{k} {e:.1e} ({n})"))
        .collect();
    CriterionReport::new(
        NAME,
        ok,
        format!(
            "{configs} configs, max rel err {max_rel:.2e}, loss gap {worst_loss:.1e}, {kinks} kinks skipped; {}",
            per_class.join(", ")
        ),
        start.elapsed(),
        Duration::from_secs(60),
    )
}
