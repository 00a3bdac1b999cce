//! Median importance score and confidence intervals for the median effect.
//!
//! Both intervals are built from order statistics `Δ_(1) <= ... <= Δ_(N)`
//! with the sentinels `Δ_(0) = -inf` and `Δ_(N+1) = +inf`.

use serde::{Deserialize, Serialize};

use crate::binom::Binomial;
use crate::effects::EffectVector;
use crate::error::{AicoError, Result};
use crate::sign_test::{check_alpha, critical_value, gamma};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianScore {
    pub value: f64,
    pub n: usize,
}

/// Empirical median; even sizes take the midpoint of the central pair.
pub fn median_score(effects: &EffectVector) -> MedianScore {
    let sorted = effects.sorted();
    let n = sorted.len();
    let value = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        let (lo, hi) = (sorted[n / 2 - 1], sorted[n / 2]);
        lo + (hi - lo) / 2.0
    };
    MedianScore { value, n }
}

/// `Δ_(k)` for `k` in `0..=N+1`, 1-based, with infinite sentinels.
pub fn order_stat(sorted: &[f64], k: usize) -> f64 {
    if k == 0 {
        f64::NEG_INFINITY
    } else if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    }
}

/// Randomized one-sided lower confidence bound, dual to the sign test.
///
/// The bound is `lower1 = Δ_(N-T)` with probability `prob_lower1 = 1 -
/// gamma`, else `lower2 = Δ_(N-T+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizedCi {
    pub lower1: f64,
    pub lower2: f64,
    pub prob_lower1: f64,
    /// The endpoint picked by the uniform draw.
    pub selected: f64,
    pub u: f64,
    pub critical: u64,
}

impl RandomizedCi {
    pub fn selected_first(&self) -> bool {
        self.prob_lower1 >= self.u
    }
}

pub fn randomized_ci(effects: &EffectVector, alpha: f64, u: f64) -> Result<RandomizedCi> {
    check_alpha(alpha)?;
    let sorted = effects.sorted();
    let n = sorted.len() as u64;
    let t = critical_value(n, alpha)?;
    let g = gamma(n, t, alpha)?.clamp(0.0, 1.0);
    let k = (n - t) as usize;
    let lower1 = order_stat(&sorted, k);
    let lower2 = order_stat(&sorted, k + 1);
    let prob_lower1 = 1.0 - g;
    Ok(RandomizedCi {
        lower1,
        lower2,
        prob_lower1,
        selected: if prob_lower1 >= u { lower1 } else { lower2 },
        u,
        critical: t,
    })
}

/// Symmetric two-sided interval `[Δ_(1+m), Δ_(N-m)]` with exact coverage
/// `1 - 2 Pi_{N,1/2}(m) >= 1 - alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSidedCi {
    pub lower: f64,
    pub upper: f64,
    pub coverage: f64,
    pub m_index: u64,
}

/// Largest `m >= 0` with `Pi_{N,1/2}(m) <= alpha / 2`, if any.
pub fn symmetric_index(n: u64, alpha: f64) -> Result<Option<u64>> {
    check_alpha(alpha)?;
    let b = Binomial::fair(n)?;
    let half = alpha / 2.0;
    // q = min{k : Pi(k) >= alpha/2}; the answer is q or q - 1
    let q = b.quantile(half)?;
    let mut m = if b.cdf(q as i64) <= half { Some(q) } else { q.checked_sub(1) };
    while let Some(k) = m {
        if b.cdf(k as i64 + 1) <= half {
            m = Some(k + 1);
        } else {
            break;
        }
    }
    Ok(m)
}

pub fn two_sided_ci(effects: &EffectVector, alpha: f64) -> Result<TwoSidedCi> {
    let sorted = effects.sorted();
    let n = sorted.len();
    let m = symmetric_index(n as u64, alpha)?.ok_or(AicoError::InsufficientSample(n, alpha))?;
    let coverage = 1.0 - 2.0 * Binomial::fair(n as u64)?.cdf(m as i64);
    let m = m as usize;
    Ok(TwoSidedCi {
        lower: order_stat(&sorted, 1 + m),
        upper: order_stat(&sorted, n - m),
        coverage,
        m_index: m as u64,
    })
}

/// Both intervals; the two-sided one is absent when `N` is too small.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub randomized: RandomizedCi,
    pub two_sided: Option<TwoSidedCi>,
}

pub fn confidence_intervals(effects: &EffectVector, alpha: f64, u: f64) -> Result<CiResult> {
    let randomized = randomized_ci(effects, alpha, u)?;
    let two_sided = match two_sided_ci(effects, alpha) {
        Ok(ci) => Some(ci),
        Err(AicoError::InsufficientSample(..)) => None,
        Err(e) => return Err(e),
    };
    Ok(CiResult { randomized, two_sided })
}
