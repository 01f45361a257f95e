//! The hypothesis-test engine.
//!
//! Under the null hypothesis that reference and target models are
//! independent, the number of probe prefixes whose target token wins the
//! candidate argmax on the target model follows `Binomial(K, 1/N)`. The
//! p-value is that distribution's exact upper tail at the observed count,
//! computed in log space and floored at 1e-300 for reporting.

mod binomial;
mod observe;

pub use binomial::{binomial_tail_log_p, binomial_tail_p, P_FLOOR};
pub use observe::{observed_statistic_black, observed_statistic_gray, PrefixOutcome, StatisticError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatError {
    #[error("candidate count must be at least 2, got {0}")]
    InvalidCandidateCount(usize),
    #[error("observed count {x_obs} exceeds trial count {k}")]
    ObservedOutOfRange { x_obs: usize, k: usize },
}

/// Test outcome at significance level alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Related,
    NotRejected,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Related => write!(f, "related"),
            Verdict::NotRejected => write!(f, "not-rejected"),
        }
    }
}

/// `related` iff `p < alpha` (strict).
pub fn decide(p: f64, alpha: f64) -> Verdict {
    debug_assert!(p > 0.0 && p <= 1.0, "p-value {p} outside (0,1]");
    debug_assert!(alpha > 0.0 && alpha < 1.0, "alpha {alpha} outside (0,1)");
    if p < alpha {
        Verdict::Related
    } else {
        Verdict::NotRejected
    }
}

/// How the target model was queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Gray,
    Black,
}

/// Full record of one correlation test between a probe set and a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub k: usize,
    pub n: usize,
    pub x_obs: usize,
    pub p_value: f64,
    pub floored: bool,
    pub alpha: f64,
    pub verdict: Verdict,
    pub access_mode: AccessMode,
    /// Queries per prefix in black-box mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries_per_prefix: Option<usize>,
    /// Per-prefix outcomes, in probe order; lets sample-count ablations
    /// re-aggregate without re-querying.
    pub hits: Vec<PrefixOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl TestReport {
    /// Assemble a report from a hit ledger.
    pub fn from_hits(
        n: usize,
        hits: Vec<PrefixOutcome>,
        alpha: f64,
        access_mode: AccessMode,
        queries_per_prefix: Option<usize>,
    ) -> Result<Self, StatError> {
        let k = hits.len();
        let x_obs = hits.iter().filter(|h| h.hit).count();
        let (p_value, floored) = binomial_tail_p(k, n, x_obs)?;
        Ok(Self {
            k,
            n,
            x_obs,
            p_value,
            floored,
            alpha,
            verdict: decide(p_value, alpha),
            access_mode,
            queries_per_prefix,
            hits,
            config_hash: None,
        })
    }

    /// Recompute the test using only the first `k` prefixes of the ledger.
    pub fn truncated(&self, k: usize) -> Result<Self, StatError> {
        let hits: Vec<PrefixOutcome> = self.hits.iter().take(k).cloned().collect();
        let mut report = Self::from_hits(
            self.n,
            hits,
            self.alpha,
            self.access_mode,
            self.queries_per_prefix,
        )?;
        report.config_hash = self.config_hash.clone();
        Ok(report)
    }
}

/// Paper-style rendering: scientific notation, three significant digits.
pub fn format_p(p: f64) -> String {
    format!("{p:.2e}")
}

#[cfg(test)]
mod tests;
