//! Exact power of the randomized sign test and its inversion to a test-set
//! size.

use serde::{Deserialize, Serialize};

use crate::binom::Binomial;
use crate::effects::EffectVector;
use crate::error::{AicoError, Result};
use crate::sign_test::{check_alpha, critical_value, gamma};

/// Largest test-set size the inversion will consider.
pub const SAMPLE_SIZE_CAP: u64 = 100_000_000;

/// Width below which the inversion checks every candidate size.
const LINEAR_WINDOW: u64 = 1024;

/// `H_{N,alpha}(s) = 1 - Pi_{N,s}(T) + gamma_N(T, alpha) pi_{N,s}(T)`.
///
/// `s = P(Δ > m0)` is the success probability of the sign statistic; the
/// null boundary is `s = 1/2`, where `H = alpha`.
pub fn power(n: u64, alpha: f64, s: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let t = critical_value(n, alpha)?;
    let g = gamma(n, t, alpha)?.clamp(0.0, 1.0);
    let alt = Binomial::new(n, s)?;
    Ok(alt.sf(t as i64) + g * alt.pmf(t)?)
}

/// Smallest `N` with `power(N) >= target_power`.
///
/// Doubles `N` until the target is met, narrows the last bracket by
/// bisection down to a short window, then scans that window upward.
pub fn required_sample_size(s: f64, alpha: f64, target_power: f64) -> Result<u64> {
    required_sample_size_capped(s, alpha, target_power, SAMPLE_SIZE_CAP)
}

pub fn required_sample_size_capped(s: f64, alpha: f64, target_power: f64, cap: u64) -> Result<u64> {
    check_alpha(alpha)?;
    if !(s > 0.5 && s < 1.0) {
        return Err(AicoError::Domain(format!("alternative s must lie in (1/2, 1), got {s}")));
    }
    if !(target_power > alpha && target_power < 1.0) {
        return Err(AicoError::Domain(format!(
            "target power must lie in (alpha, 1), got {target_power}"
        )));
    }
    let mut best = (0u64, 0.0f64);
    let mut eval = |n: u64| -> Result<f64> {
        let h = power(n, alpha, s)?;
        if h > best.1 {
            best = (n, h);
        }
        Ok(h)
    };

    let mut hi = 1u64;
    loop {
        if eval(hi)? >= target_power {
            break;
        }
        if hi >= cap {
            return Err(AicoError::PowerNotReachable {
                target: target_power,
                cap,
                best_n: best.0,
                best_power: best.1,
            });
        }
        hi = (hi * 2).min(cap);
    }
    // power(lo) < target <= power(hi)
    let mut lo = hi / 2;
    if lo == 0 {
        return Ok(hi);
    }
    while hi - lo > LINEAR_WINDOW {
        let mid = lo + (hi - lo) / 2;
        if eval(mid)? >= target_power {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    for n in lo + 1..hi {
        if eval(n)? >= target_power {
            return Ok(n);
        }
    }
    Ok(hi)
}

/// Fraction of effects above `m0`: a plug-in estimate of `s` from a pilot
/// sample. No inferential guarantee attached.
pub fn pilot_success_rate(effects: &EffectVector, m0: f64) -> f64 {
    let above = effects.values().iter().filter(|&&d| d > m0).count();
    above as f64 / effects.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub s: f64,
    pub power: f64,
    pub n: u64,
}

/// Required `N` for every `(s, power)` pair, as plotted in a sample-size
/// versus power chart.
pub fn sample_size_curve(s_values: &[f64], alpha: f64, powers: &[f64]) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(s_values.len() * powers.len());
    for &s in s_values {
        for &p in powers {
            out.push(CurvePoint {
                s,
                power: p,
                n: required_sample_size(s, alpha, p)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_at_null_boundary_is_alpha() {
        for &n in &[1u64, 2, 7, 50, 333, 1000] {
            for &a in &[0.01, 0.05, 0.1, 0.3] {
                assert!((power(n, a, 0.5).unwrap() - a).abs() < 1e-10, "n={n} a={a}");
            }
        }
    }

    #[test]
    fn power_single_trial_near_one() {
        // T = 1, gamma = 0.05 / 0.5; H -> gamma as s -> 1
        let h = power(1, 0.05, 1.0 - 1e-12).unwrap();
        assert!((h - 0.1).abs() < 1e-10);
    }

    #[test]
    fn power_n20_s08() {
        // exact binomial at s = 0.8: P(X > 14) = sum_{k=15}^{20} C(20,k) .8^k .2^(20-k)
        let binom = |k: u64| -> f64 {
            let mut c = 1.0;
            for i in 0..k {
                c = c * (20 - i) as f64 / (i + 1) as f64;
            }
            c * 0.8f64.powi(k as i32) * 0.2f64.powi(20 - k as i32)
        };
        let tail: f64 = (15..=20).map(binom).sum();
        let g = (1_026_876.0 / 1_048_576.0 - 0.95) / (38_760.0 / 1_048_576.0);
        let expected = tail + g * binom(14);
        assert!((power(20, 0.05, 0.8).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn sample_size_is_minimal() {
        for &(s, target) in &[(0.55, 0.9), (0.9, 0.9), (0.6, 0.8)] {
            let n = required_sample_size(s, 0.05, target).unwrap();
            assert!(power(n, 0.05, s).unwrap() >= target);
            assert!(power(n - 1, 0.05, s).unwrap() < target, "s={s}");
        }
        let n = required_sample_size(0.9, 0.05, 0.9).unwrap();
        assert!(n < 100, "{n}");
    }

    #[test]
    fn sample_size_errors() {
        assert!(required_sample_size(0.5, 0.05, 0.9).is_err());
        assert!(required_sample_size(0.6, 0.05, 0.01).is_err());
        let err = required_sample_size_capped(0.501, 0.05, 0.999, 1000).unwrap_err();
        match err {
            AicoError::PowerNotReachable { best_n, best_power, .. } => {
                assert_eq!(best_n, 1000);
                assert!(best_power > 0.05 && best_power < 0.999);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pilot_rate() {
        let e = EffectVector::from_values("f", vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(pilot_success_rate(&e, 0.0), 0.5);
    }
}
