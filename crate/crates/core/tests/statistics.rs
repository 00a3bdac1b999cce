//! Properties of the sign test, its intervals and the power function.

use aico::binom::Binomial;
use aico::effects::EffectVector;
use aico::intervals::{confidence_intervals, randomized_ci, symmetric_index, two_sided_ci};
use aico::power::{power, required_sample_size};
use aico::sign_test::{critical_value, decide_counts, gamma, p_interval, SignCounts};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `P(X > n)` for `X ~ B(N, 1/2)`, exactly.
fn exact_sf(big_n: u64, n: u64) -> BigRational {
    let mut choose = BigInt::one();
    let mut total = BigInt::zero();
    for j in 0..=big_n {
        if j > 0 {
            choose = choose * (big_n - j + 1) / j;
        }
        if j > n {
            total += &choose;
        }
    }
    BigRational::new(total, BigInt::one() << big_n)
}

fn exact_gamma(big_n: u64, t: u64, alpha: BigRational) -> BigRational {
    let pmf = exact_sf(big_n, t.wrapping_sub(1)) - exact_sf(big_n, t);
    (alpha - exact_sf(big_n, t)) / pmf
}

#[test]
fn gamma_agrees_with_exact_rationals() {
    let twentieth = BigRational::new(BigInt::one(), BigInt::from(20));
    let g = exact_gamma(20, 14, twentieth.clone()).to_f64().unwrap();
    assert!((gamma(20, 14, 0.05).unwrap() - g).abs() < 1e-14);
    assert!((g - 0.792_796_697_626_419).abs() < 1e-14);
    for n in [1u64, 7, 30, 64, 150] {
        let t = critical_value(n, 0.05).unwrap();
        let exact = exact_gamma(n, t, twentieth.clone()).to_f64().unwrap();
        assert!((gamma(n, t, 0.05).unwrap() - exact).abs() < 1e-12, "N={n}");
        assert!((0.0..=1.0).contains(&exact));
    }
}

/// At `N = 15` the randomized lower bound covers a continuous median with
/// probability exactly `1 - alpha`; the two-sided interval has its stated
/// coverage.
#[test]
fn order_statistic_coverage_at_small_n() {
    let (alpha, reps) = (0.1, 40_000);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ts = symmetric_index(15, alpha).unwrap().unwrap();
    let ts_coverage = 1.0 - 2.0 * Binomial::fair(15).unwrap().cdf(ts as i64);
    let (mut one, mut two) = (0usize, 0usize);
    for _ in 0..reps {
        let v: Vec<f64> = (0..15).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
        // median of a standard lognormal is 1
        let e = EffectVector::from_values("x", v).unwrap();
        let ci = confidence_intervals(&e, alpha, rng.random()).unwrap();
        one += usize::from(ci.randomized.selected <= 1.0);
        let t = ci.two_sided.unwrap();
        two += usize::from(t.lower <= 1.0 && 1.0 <= t.upper);
    }
    let se = |p: f64| (p * (1.0 - p) / reps as f64).sqrt();
    let f1 = one as f64 / reps as f64;
    let f2 = two as f64 / reps as f64;
    assert!((f1 - (1.0 - alpha)).abs() < 4.0 * se(alpha), "{f1}");
    assert!((f2 - ts_coverage).abs() < 4.0 * se(ts_coverage), "{f2} vs {ts_coverage}");
}

#[test]
fn sample_size_is_minimal() {
    for (s, alpha, target) in [(0.55, 0.05, 0.9), (0.9, 0.05, 0.9), (0.6, 0.01, 0.8), (0.7, 0.05, 0.5)] {
        let r = required_sample_size(s, alpha, target).unwrap();
        assert!(power(r, alpha, s).unwrap() >= target);
        assert!(r == 1 || power(r - 1, alpha, s).unwrap() < target, "s={s} R={r}");
    }
    assert!(required_sample_size(0.9, 0.05, 0.9).unwrap() < 100);
}

#[test]
fn too_small_samples_have_no_two_sided_interval() {
    let e = EffectVector::from_values("x", vec![1.0, 2.0, 3.0]).unwrap();
    assert!(two_sided_ci(&e, 0.05).is_err());
    assert!(confidence_intervals(&e, 0.05, 0.5).unwrap().two_sided.is_none());
}

fn effects_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..120)
}

proptest! {
    #[test]
    fn p_interval_brackets_and_orders(n in 1u64..400, frac in 0.0f64..=1.0) {
        let n_plus = (frac * n as f64).round() as u64;
        let (a, b) = p_interval(n, n_plus).unwrap();
        prop_assert!(0.0 <= a && a <= b && b <= 1.0);
        if n_plus < n {
            let (a2, b2) = p_interval(n, n_plus + 1).unwrap();
            prop_assert!(a2 <= a && b2 <= b);
            prop_assert_eq!(b2, a);
        }
    }

    #[test]
    fn decision_matches_realized_p(n in 1u64..300, frac in 0.0f64..=1.0, u in 0.0f64..1.0, alpha in 0.001f64..0.3) {
        let n_plus = (frac * n as f64).round() as u64;
        let r = decide_counts(SignCounts { n_plus, n_effective: n }, alpha, u).unwrap();
        let p = r.realized_p(u);
        // p <= alpha exactly when rejecting, up to rounding in the mixture
        if (p - alpha).abs() > 1e-12 {
            prop_assert_eq!(r.rejected(), p <= alpha);
        }
        prop_assert!((0.0..=1.0).contains(&r.reject_prob));
        prop_assert!(r.gamma >= 0.0 && r.gamma <= 1.0);
    }

    #[test]
    fn rejection_is_monotone_in_n_plus(n in 1u64..300, alpha in 0.001f64..0.3, u in 0.0f64..1.0) {
        let mut prev = false;
        for n_plus in 0..=n {
            let rej = decide_counts(SignCounts { n_plus, n_effective: n }, alpha, u).unwrap().rejected();
            prop_assert!(rej || !prev);
            prev = rej;
        }
    }

    #[test]
    fn randomized_ci_endpoints_are_ordered(v in effects_strategy(), alpha in 0.001f64..0.3, u in 0.0f64..1.0) {
        let e = EffectVector::from_values("x", v).unwrap();
        let ci = randomized_ci(&e, alpha, u).unwrap();
        prop_assert!(ci.lower1 <= ci.lower2);
        prop_assert!(ci.selected == ci.lower1 || ci.selected == ci.lower2);
        prop_assert!((0.0..=1.0).contains(&ci.prob_lower1));
    }

    #[test]
    fn shifting_effects_shifts_intervals(v in effects_strategy(), shift in -10.0f64..10.0) {
        let e = EffectVector::from_values("x", v.clone()).unwrap();
        let s = EffectVector::from_values("x", v.iter().map(|x| x + shift).collect()).unwrap();
        let (a, b) = (randomized_ci(&e, 0.05, 0.3).unwrap(), randomized_ci(&s, 0.05, 0.3).unwrap());
        for (x, y) in [(a.lower1, b.lower1), (a.lower2, b.lower2)] {
            // an empty lower order statistic is -inf in both
            prop_assert!(x == y || (x + shift - y).abs() < 1e-9, "{x} {y}");
        }
    }

    #[test]
    fn power_is_monotone_in_s(n in 1u64..2000, alpha in 0.001f64..0.3, s in 0.5f64..0.99) {
        let lo = power(n, alpha, s).unwrap();
        let hi = power(n, alpha, (s + 0.01).min(0.999)).unwrap();
        prop_assert!(lo <= hi + 1e-12);
        prop_assert!(lo >= alpha - 1e-10);
    }

    #[test]
    fn symmetric_index_is_maximal(n in 1u64..3000, alpha in 0.001f64..0.3) {
        let b = Binomial::fair(n).unwrap();
        match symmetric_index(n, alpha).unwrap() {
            Some(m) => {
                prop_assert!(b.cdf(m as i64) <= alpha / 2.0);
                prop_assert!(b.cdf(m as i64 + 1) > alpha / 2.0);
            }
            None => prop_assert!(b.cdf(0) > alpha / 2.0),
        }
    }
}
