//! Pass/fail records shared by the suites and the command line.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub identity: String,
    pub max_residual: f64,
    pub threshold: f64,
    /// `true` when the residual must stay at or below the threshold, `false`
    /// for negative controls that must reach it.
    pub upper_bound: bool,
    pub pass: bool,
}

impl CheckResult {
    pub fn at_most(identity: impl Into<String>, max_residual: f64, threshold: f64) -> Self {
        let pass = max_residual <= threshold;
        CheckResult { identity: identity.into(), max_residual, threshold, upper_bound: true, pass }
    }

    pub fn at_least(identity: impl Into<String>, value: f64, threshold: f64) -> Self {
        let pass = value >= threshold;
        CheckResult { identity: identity.into(), max_residual: value, threshold, upper_bound: false, pass }
    }

    pub fn flag(identity: impl Into<String>, ok: bool) -> Self {
        CheckResult {
            identity: identity.into(),
            max_residual: if ok { 0.0 } else { 1.0 },
            threshold: 0.0,
            upper_bound: true,
            pass: ok,
        }
    }
}

/// Running maximum of a residual across instances.
#[derive(Clone, Debug)]
pub struct Tally {
    pub identity: String,
    pub threshold: f64,
    pub upper_bound: bool,
    pub extreme: f64,
}

impl Tally {
    pub fn at_most(identity: &str, threshold: f64) -> Self {
        Tally { identity: identity.into(), threshold, upper_bound: true, extreme: 0.0 }
    }

    pub fn at_least(identity: &str, threshold: f64) -> Self {
        Tally { identity: identity.into(), threshold, upper_bound: false, extreme: f64::INFINITY }
    }

    pub fn add(&mut self, v: f64) {
        // NaN must fail loudly
        self.extreme = if v.is_nan() {
            f64::NAN
        } else if self.extreme.is_nan() {
            self.extreme
        } else if self.upper_bound {
            self.extreme.max(v)
        } else {
            self.extreme.min(v)
        };
    }

    pub fn finish(&self) -> CheckResult {
        if self.upper_bound {
            CheckResult::at_most(self.identity.clone(), self.extreme, self.threshold)
        } else {
            CheckResult::at_least(self.identity.clone(), self.extreme, self.threshold)
        }
    }
}
