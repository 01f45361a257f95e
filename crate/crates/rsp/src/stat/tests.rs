use super::*;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use proptest::prelude::*;

/// Exact rational upper tail: `sum_{j=x}^{K} C(K,j) (N-1)^{K-j} / N^K`.
/// Independent of the log-space implementation path.
pub fn exact_tail(k: usize, n: usize, x_obs: usize) -> BigRational {
    let mut numer = BigInt::zero();
    for j in x_obs..=k {
        numer += binomial_coeff(k, j) * BigInt::from(n - 1).pow((k - j) as u32);
    }
    BigRational::new(numer, BigInt::from(n).pow(k as u32))
}

fn binomial_coeff(n: usize, k: usize) -> BigInt {
    let mut c = BigInt::one();
    for i in 0..k {
        c = c * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    c
}

#[test]
fn matches_rational_oracle_for_small_k() {
    for n in [2usize, 10, 26] {
        for k in 0..=20usize {
            for x in 0..=k {
                let (p, floored) = binomial_tail_p(k, n, x).unwrap();
                assert!(!floored);
                let exact = exact_tail(k, n, x).to_f64().unwrap();
                let rel = (p - exact).abs() / exact;
                assert!(
                    rel < 1e-12,
                    "K={k} N={n} x={x}: {p} vs exact {exact} (rel {rel:.2e})"
                );
            }
        }
    }
}

#[test]
fn certain_event_and_single_draw() {
    assert_eq!(binomial_tail_p(10, 26, 0).unwrap(), (1.0, false));
    let (p, floored) = binomial_tail_p(1, 26, 1).unwrap();
    assert!(!floored);
    assert!((p - 1.0 / 26.0).abs() < 1e-15, "got {p}");
}

#[test]
fn deep_tail_hits_the_floor() {
    // all 500 prefixes hit: raw p = 26^-500, reported at the floor
    let log_p = binomial_tail_log_p(500, 26, 500).unwrap();
    let expected = 500.0 * (1.0f64 / 26.0).ln();
    assert!(
        (log_p - expected).abs() < 1e-9,
        "log p {log_p} vs {expected}"
    );
    let (p, floored) = binomial_tail_p(500, 26, 500).unwrap();
    assert_eq!(p, 1e-300);
    assert!(floored);
    assert_eq!(format_p(p), "1.00e-300");
}

#[test]
fn domain_violations_are_rejected() {
    assert_eq!(
        binomial_tail_p(5, 1, 0).unwrap_err(),
        StatError::InvalidCandidateCount(1)
    );
    assert_eq!(
        binomial_tail_p(5, 10, 6).unwrap_err(),
        StatError::ObservedOutOfRange { x_obs: 6, k: 5 }
    );
}

#[test]
fn agrees_with_incomplete_beta_continued_fraction() {
    // Eq-form identity: P(X >= x) = I_{1/N}(x, K-x+1). statrs evaluates the
    // regularized incomplete beta via the continued-fraction expansion.
    let (k, n) = (500usize, 26usize);
    for x in 1..=k {
        let log_p = binomial_tail_log_p(k, n, x).unwrap();
        if log_p < (1e-280f64).ln() {
            break;
        }
        let beta = statrs::function::beta::beta_reg(x as f64, (k - x + 1) as f64, 1.0 / n as f64);
        let rel = (log_p - beta.ln()).abs();
        assert!(
            rel < 1e-9,
            "x={x}: log-sum {log_p} vs beta {}",
            beta.ln()
        );
    }
}

#[test]
fn decide_uses_strict_threshold() {
    assert_eq!(decide(0.049, 0.05), Verdict::Related);
    assert_eq!(decide(0.05, 0.05), Verdict::NotRejected);
    assert_eq!(decide(1.0, 0.05), Verdict::NotRejected);
}

#[test]
fn p_formatting_matches_table_style() {
    assert_eq!(format_p(0.0385), "3.85e-2");
    assert_eq!(format_p(9.08e-240), "9.08e-240");
    assert_eq!(format_p(1.0), "1.00e0");
}

fn fake_hits(pattern: &[bool]) -> Vec<PrefixOutcome> {
    pattern
        .iter()
        .enumerate()
        .map(|(i, &hit)| PrefixOutcome {
            index: i,
            target: 0,
            hit,
            predicted: Some(usize::from(!hit)),
            misses: None,
        })
        .collect()
}

#[test]
fn report_from_hits_and_truncation() {
    let hits = fake_hits(&[true, true, false, true]);
    let report = TestReport::from_hits(10, hits, 0.05, AccessMode::Gray, None).unwrap();
    assert_eq!((report.k, report.x_obs), (4, 3));
    assert_eq!(report.verdict, Verdict::Related);

    let head = report.truncated(2).unwrap();
    assert_eq!((head.k, head.x_obs), (2, 2));
    let (expect, _) = binomial_tail_p(2, 10, 2).unwrap();
    assert_eq!(head.p_value, expect);
}

#[test]
fn report_round_trips_through_json() {
    let hits = fake_hits(&[true, false]);
    let report = TestReport::from_hits(26, hits, 0.05, AccessMode::Black, Some(50)).unwrap();
    let json = serde_json::to_string_pretty(&report).unwrap();
    let back: TestReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
}

proptest! {
    #[test]
    fn tail_is_a_probability(k in 0usize..60, n in 2usize..30, frac in 0.0f64..=1.0) {
        let x = ((k as f64) * frac).round() as usize;
        let (p, _) = binomial_tail_p(k, n, x.min(k)).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn tail_strictly_decreases_in_x(k in 1usize..60, n in 2usize..30) {
        let mut prev = binomial_tail_log_p(k, n, 0).unwrap();
        for x in 1..=k {
            let cur = binomial_tail_log_p(k, n, x).unwrap();
            prop_assert!(cur < prev, "x={x}: {cur} !< {prev}");
            prev = cur;
        }
    }
}
