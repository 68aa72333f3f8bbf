use std::time::{Duration, Instant};

use forge_core::config::{ForgeConfig, DEFAULT_TOML};

use crate::CriterionReport;

pub const NAME: &str = "shipped defaults";

/// Reads the shipped config file and compares each published constant.
pub fn constants_suite() -> CriterionReport {
    let start = Instant::now();
    let mut wrong = Vec::new();
    match ForgeConfig::from_toml(DEFAULT_TOML) {
        Err(e) => wrong.push(format!("config does not parse: {e}")),
        Ok(c) => {
            let checks: [(&str, f64, f64); 13] = [
                ("animation.videos (K)", c.animation.videos as f64, 10.0),
                ("animation.frames (T)", c.animation.frames as f64, 25.0),
                ("sampler.tau_tr", c.sampler.tau_tr as f64, 16.0),
                ("sampler.tau_refine", c.sampler.tau_refine as f64, 9.0),
                (
                    "train.embedding_dim (W)",
                    c.train.embedding_dim as f64,
                    16.0,
                ),
                ("visibility.beta", c.visibility.beta, 1.0),
                ("train.weights.depth", c.train.weights.depth, 1.0),
                ("canonical.lambda_depth", c.canonical.lambda_depth, 1.0),
                ("train.weights.rigidity", c.train.weights.rigidity, 1.0),
                ("train.sh_degree", c.train.sh_degree as f64, 3.0),
                ("canonical.sh_degree", c.canonical.sh_degree as f64, 3.0),
                (
                    "canonical.iterations",
                    c.canonical.iterations as f64,
                    3000.0,
                ),
                ("train.iterations", c.train.iterations as f64, 15000.0),
            ];
            for (key, got, want) in checks {
                if got != want {
                    wrong.push(format!("{key} = {got}, expected {want}"));
                }
            }
            if c != ForgeConfig::default() {
                wrong.push("ForgeConfig::default() differs from the shipped file".into());
            }
        }
    }
    let detail = if wrong.is_empty() {
        "K=10 T=25 tau_tr=16 tau_refine=9 W=16 beta=1 lambda_depth=lambda_rigidity=1 SH 3 iterations 3000/15000".to_string()
    } else {
        wrong.join("; ")
    };
    CriterionReport::new(
        NAME,
        wrong.is_empty(),
        detail,
        start.elapsed(),
        Duration::from_secs(1),
    )
}
