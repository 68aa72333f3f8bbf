//! Reference implementations written independently of the engine, and the
//! acceptance suites that hold the engine against them.

pub mod oracles;
pub mod scenes;
pub mod suites;

use std::time::Duration;

use serde::Serialize;

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug, Serialize)]
pub struct CriterionReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CriterionReport {
    pub fn new(name: &str, ok: bool, detail: String, elapsed: Duration, budget: Duration) -> Self {
        Self {
            name: name.to_string(),
            passed: ok && elapsed <= budget,
            detail,
            elapsed,
            budget,
        }
    }

    /// `PASS name (1.23 s / 5 s): detail`
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2} s / {} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        )
    }
}
