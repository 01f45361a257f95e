//! Exact binomial upper tail in log space.
//!
//! `P(X >= x)` for `X ~ Binomial(K, 1/N)` is a sum of at most `K+1` terms;
//! with `K <= 500` the direct log-sum-exp over `ln C(K,j) + j ln(1/N) +
//! (K-j) ln(1-1/N)` is both exact to near machine precision and stable far
//! below the 1e-300 reporting floor. The equivalent regularized
//! incomplete-beta form serves as a cross-validation oracle in the tests.

use super::StatError;

/// Reported p-values are capped below at this value; double precision
/// cannot faithfully represent smaller tails.
pub const P_FLOOR: f64 = 1e-300;

/// Natural log of the raw (unfloored) upper-tail probability.
pub fn binomial_tail_log_p(k: usize, n: usize, x_obs: usize) -> Result<f64, StatError> {
    if n < 2 {
        return Err(StatError::InvalidCandidateCount(n));
    }
    if x_obs > k {
        return Err(StatError::ObservedOutOfRange { x_obs, k });
    }
    if x_obs == 0 {
        return Ok(0.0);
    }
    let ln_p = -(n as f64).ln();
    let ln_q = (-1.0 / n as f64).ln_1p();
    let ln_fact = ln_factorials(k);
    let term = |j: usize| -> f64 {
        ln_fact[k] - ln_fact[j] - ln_fact[k - j] + j as f64 * ln_p + (k - j) as f64 * ln_q
    };
    let max = (x_obs..=k).map(term).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (x_obs..=k).map(|j| (term(j) - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Exact upper-tail p-value with the 1e-300 reporting floor.
///
/// Returns `(p, floored)`; `floored` is set iff the raw value fell below
/// [`P_FLOOR`], in which case `p` is exactly `P_FLOOR`.
pub fn binomial_tail_p(k: usize, n: usize, x_obs: usize) -> Result<(f64, bool), StatError> {
    let log_p = binomial_tail_log_p(k, n, x_obs)?;
    if log_p < P_FLOOR.ln() {
        Ok((P_FLOOR, true))
    } else {
        Ok((log_p.exp().min(1.0), false))
    }
}

fn ln_factorials(k: usize) -> Vec<f64> {
    let mut f = vec![0.0; k + 1];
    for i in 1..=k {
        f[i] = f[i - 1] + (i as f64).ln();
    }
    f
}
