//! Executable cross-module invariants: gradient, equivalence, pruning-oracle and end-to-end suites.
//!
//! Every suite returns a [`SuiteReport`] with measured values next to their tolerances;
//! the `acceptance` test target turns those into one PASS/FAIL line per criterion.

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub mod e2e;
pub mod equivalence;
pub mod gradcheck;
pub mod gradient;
pub mod oracle;
pub mod protocol;
pub mod structural;

/// One verified property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// The invariant, verbatim, so a failure explains itself.
    pub invariant: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
    /// Suite-specific artifacts (rankings, per-seed metrics).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl SuiteReport {
    pub fn new(suite: &str) -> Self {
        SuiteReport { suite: suite.into(), passed: true, seconds: 0.0, checks: Vec::new(), extra: serde_json::Value::Null }
    }

    /// Records a check whose measured value must not exceed `tolerance`.
    pub fn at_most(&mut self, name: impl Into<String>, invariant: &str, measured: f64, tolerance: f64, detail: impl Into<String>) {
        self.push(name, invariant, measured <= tolerance, measured, tolerance, detail);
    }

    /// Records a check whose measured value must reach `threshold`.
    pub fn at_least(&mut self, name: impl Into<String>, invariant: &str, measured: f64, threshold: f64, detail: impl Into<String>) {
        self.push(name, invariant, measured >= threshold, measured, threshold, detail);
    }

    pub fn push(&mut self, name: impl Into<String>, invariant: &str, passed: bool, measured: f64, tolerance: f64, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(Check { name: name.into(), invariant: invariant.into(), passed, measured, tolerance, detail: detail.into() });
    }

    /// A check that could not run at all.
    pub fn error(&mut self, name: impl Into<String>, invariant: &str, err: impl std::fmt::Display) {
        self.push(name, invariant, false, f64::NAN, f64::NAN, format!("error: {err}"));
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// One line naming the first violated invariant, or a pass summary.
    pub fn summary(&self) -> String {
        match self.failures().first() {
            None => format!("{} checks passed in {:.1}s", self.checks.len(), self.seconds),
            Some(c) => format!(
                "{}/{} failed; first: {} — {} (measured {:.3e}, bound {:.3e}) {}",
                self.failures().len(),
                self.checks.len(),
                c.name,
                c.invariant,
                c.measured,
                c.tolerance,
                c.detail
            ),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Times `f`, storing the elapsed seconds on the report it returns.
pub fn timed(f: impl FnOnce() -> SuiteReport) -> SuiteReport {
    let t = Instant::now();
    let mut r = f();
    r.seconds = t.elapsed().as_secs_f64();
    r
}
