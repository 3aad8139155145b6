use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Relative slack when deciding whether an outcome is at most as likely
/// as the observed one.
const PMF_TIE_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceResult {
    pub wins_a: u64,
    pub wins_b: u64,
    pub share_a: f64,
    /// Wilson score interval.
    pub ci_95: (f64, f64),
    /// Exact two-sided binomial test against `p = 0.5`.
    pub p_exact: f64,
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// Exact two-sided binomial p-value at `p = 0.5`: total probability of
/// outcomes no more likely than `k` successes out of `n`.
pub fn binomial_two_sided_p(k: u64, n: u64) -> f64 {
    let lf = ln_factorials(n);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let pmf = |i: u64| (lf[n as usize] - lf[i as usize] - lf[(n - i) as usize] + ln_half_n).exp();
    let observed = pmf(k);
    let mut total = 0.0;
    let mut included = 0;
    for i in 0..=n {
        let p = pmf(i);
        if p <= observed * (1.0 + PMF_TIE_TOLERANCE) {
            total += p;
            included += 1;
        }
    }
    if included == n + 1 {
        1.0
    } else {
        total.min(1.0)
    }
}

pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

pub fn preference_analysis(wins_a: u64, wins_b: u64) -> Result<PreferenceResult> {
    let n = wins_a + wins_b;
    if n == 0 {
        return Err(Error::Contract("preference analysis needs at least one vote".into()));
    }
    Ok(PreferenceResult {
        wins_a,
        wins_b,
        share_a: wins_a as f64 / n as f64,
        ci_95: wilson_interval(wins_a, n, Z_95),
        p_exact: binomial_two_sided_p(wins_a, n),
    })
}
