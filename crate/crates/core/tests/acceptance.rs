//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Runs as a plain binary so the lines survive `cargo test`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use aico::binom::Binomial;
use aico::crossfit::{crossfit_minp, FoldResult, DEFAULT_FOLDS};
use aico::effects::EffectVector;
use aico::intervals::{randomized_ci, symmetric_index};
use aico::power::power;
use aico::sign_test::{count_exceedances, critical_value, decide_counts, gamma, SignCounts, TestConfig, TieMode};
use aico::synthetic::{feature_name, run_bench, BenchConfig, Task, ACTIVE, DIM};
use num_bigint::BigUint;
use num_traits::{Float, One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const REPS: usize = 20_000;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Continuous effects with `P(effect > 0) = s`.
fn draw_effects(r: &mut ChaCha8Rng, n: usize, s: f64) -> EffectVector {
    let values = (0..n)
        .map(|_| {
            let magnitude = 0.01 + r.sample::<f64, _>(StandardNormal).abs();
            if r.random_bool(s) { magnitude } else { -magnitude }
        })
        .collect();
    EffectVector::from_values("x", values).unwrap()
}

fn null_counts(r: &mut ChaCha8Rng, n: usize) -> SignCounts {
    let e = draw_effects(r, n, 0.5);
    count_exceedances(&e, 0.0, TieMode::Strict, 0)
}

/// `x` as an exact ratio `a / 2^k`.
fn dyadic(x: f64) -> (BigUint, u32) {
    let (mantissa, exponent, _) = x.integer_decode();
    assert!(exponent < 0);
    (BigUint::from(mantissa), (-exponent) as u32)
}

/// `num / 2^shift` from the top 64 bits of `num` (relative error `< 2^-63`).
fn ratio(num: &BigUint, shift: u64) -> f64 {
    let bits = num.bits();
    let drop = bits.saturating_sub(64);
    let top = (num >> drop).to_f64().unwrap();
    top * 2f64.powi(drop as i32 - shift as i32)
}

fn binomial_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut quantile_mismatch = 0usize;
    for &p in &[0.5, 0.3, 0.55, 0.9] {
        let (a, k) = dyadic(p);
        let b = (BigUint::one() << k) - &a;
        for n in 1..=200u64 {
            let bin = Binomial::new(n, p).unwrap();
            let mut a_pow = vec![BigUint::one()];
            let mut b_pow = vec![BigUint::one()];
            for i in 1..=n as usize {
                a_pow.push(&a_pow[i - 1] * &a);
                b_pow.push(&b_pow[i - 1] * &b);
            }
            let shift = k as u64 * n;
            let mut choose = BigUint::one();
            let mut cum = BigUint::zero();
            let mut cdfs = Vec::with_capacity(n as usize + 1);
            for j in 0..=n {
                if j > 0 {
                    choose = choose * BigUint::from(n - j + 1) / BigUint::from(j);
                }
                let mass = &choose * &a_pow[j as usize] * &b_pow[(n - j) as usize];
                cum += &mass;
                worst = worst.max((bin.pmf(j).unwrap() - ratio(&mass, shift)).abs());
                worst = worst.max((bin.cdf(j as i64) - ratio(&cum, shift)).abs());
                cdfs.push(cum.clone());
            }
            for &level in &[1e-6, 0.005, 0.025, 0.05, 0.3, 0.5, 0.7, 0.95, 0.975, 0.995] {
                // exhaustive scan, compared exactly: cdf_j >= level
                let (la, lk) = dyadic(level);
                let scan = cdfs
                    .iter()
                    .position(|c| (c << lk as u64) >= (&la << shift))
                    .unwrap() as u64;
                if bin.quantile(level).unwrap() != scan {
                    quantile_mismatch += 1;
                }
            }
        }
    }
    Verdict::new(
        worst <= 1e-12 && quantile_mismatch == 0,
        format!("max |error| {worst:.2e}, quantile mismatches {quantile_mismatch}"),
    )
}

fn reference_numbers() -> Verdict {
    let alpha = 0.01;
    let cases = [(500_000u64, 0.99007, 0.988), (7500, 0.99063, 0.234), (4029, 0.99023, 0.830)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, coverage, endpoint) in cases {
        let m = symmetric_index(n, alpha).unwrap().unwrap();
        let cov = 1.0 - 2.0 * Binomial::fair(n).unwrap().cdf(m as i64);
        let t = critical_value(n, alpha).unwrap();
        let p1 = 1.0 - gamma(n, t, alpha).unwrap();
        pass &= (cov - coverage).abs() <= 5e-6 && (p1 - endpoint).abs() <= 5e-4;
        parts.push(format!("N={n}: coverage {cov:.5}, 1-gamma {p1:.4}"));
    }
    Verdict::new(pass, parts.join("; "))
}

fn size_exactness() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for &alpha in &[0.01, 0.05] {
        for &n in &[51usize, 101, 501] {
            let mut r = rng(1000 + n as u64 + (alpha * 1000.0) as u64);
            let hits = (0..REPS)
                .filter(|_| {
                    let c = null_counts(&mut r, n);
                    decide_counts(c, alpha, r.random()).unwrap().rejected()
                })
                .count();
            let f = hits as f64 / REPS as f64;
            pass &= (f - alpha).abs() <= 3.0 * se(alpha, REPS);
            parts.push(format!("a={alpha},N={n}: {f:.4}"));
        }
    }
    Verdict::new(pass, parts.join(" "))
}

fn p_value_uniformity() -> Verdict {
    let mut r = rng(7);
    let mut p: Vec<f64> = (0..REPS)
        .map(|_| {
            let c = null_counts(&mut r, 101);
            decide_counts(c, 0.05, r.random()).unwrap().realized_p(r.random())
        })
        .collect();
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let d = p
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov critical value at the 0.1% level
    let stat = n.sqrt() * d;
    Verdict::new(stat < 1.9495, format!("sqrt(n) D = {stat:.4} (critical 1.9495)"))
}

fn ci_coverage() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for &alpha in &[0.05, 0.01] {
        let mut r = rng(11 + (alpha * 100.0) as u64);
        let covered = (0..REPS)
            .filter(|_| {
                // median 0.3, continuous
                let z: Vec<f64> = (0..101).map(|_| 0.3 + r.sample::<f64, _>(StandardNormal)).collect();
                let e = EffectVector::from_values("x", z).unwrap();
                randomized_ci(&e, alpha, r.random()).unwrap().selected <= 0.3
            })
            .count();
        let f = covered as f64 / REPS as f64;
        pass &= (f - (1.0 - alpha)).abs() <= 3.0 * se(alpha, REPS);
        parts.push(format!("a={alpha}: {f:.4}"));
    }
    Verdict::new(pass, parts.join(" "))
}

fn power_agreement() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for &(n, alpha, s) in &[(101usize, 0.05, 0.6), (501, 0.01, 0.55)] {
        let h = power(n as u64, alpha, s).unwrap();
        let mut r = rng(n as u64);
        let hits = (0..REPS)
            .filter(|_| {
                let e = draw_effects(&mut r, n, s);
                let c = count_exceedances(&e, 0.0, TieMode::Strict, 0);
                decide_counts(c, alpha, r.random()).unwrap().rejected()
            })
            .count();
        let f = hits as f64 / REPS as f64;
        pass &= (f - h).abs() <= 3.0 * se(h, REPS);
        parts.push(format!("({n},{alpha},{s}): {f:.4} vs H {h:.4}"));
    }
    let mut worst: f64 = 0.0;
    for n in 1..=2000u64 {
        for &alpha in &[0.001, 0.01, 0.05, 0.1, 0.25] {
            worst = worst.max((power(n, alpha, 0.5).unwrap() - alpha).abs());
        }
    }
    pass &= worst <= 1e-10;
    parts.push(format!("max |H(1/2) - alpha| {worst:.1e}"));
    Verdict::new(pass, parts.join("; "))
}

fn known_truth() -> Verdict {
    let config = BenchConfig::new(Task::Regression, 10_000, 10, 0.01, 2024);
    let (_, summary) = run_bench(&config).unwrap();
    let active_ok = (1..=ACTIVE).all(|k| summary.count(&feature_name(k)) == 10);
    let false_rej = summary.false_rejections();
    let weakest = (1..=ACTIVE).map(|k| summary.count(&feature_name(k))).min().unwrap();
    let nulls: Vec<String> = (ACTIVE + 1..=DIM).map(|k| summary.count(&feature_name(k)).to_string()).collect();
    Verdict::new(
        active_ok && false_rej <= 3,
        format!(
            "weakest active {weakest}/10, null rejections [{}] total {false_rej}",
            nulls.join(",")
        ),
    )
}

fn duality() -> Verdict {
    let mut disagreements = 0usize;
    let mut checked = 0usize;
    for &alpha in &[0.01, 0.05] {
        for n in 1..=50usize {
            for n_plus in 0..=n {
                let values = (0..n)
                    .map(|i| if i < n_plus { (i + 1) as f64 } else { -((i + 1) as f64) })
                    .collect();
                let e = EffectVector::from_values("x", values).unwrap();
                let counts = count_exceedances(&e, 0.0, TieMode::Strict, 0);
                for j in 0..64 {
                    let u = (j as f64 + 0.5) / 64.0;
                    let test = decide_counts(counts, alpha, u).unwrap();
                    // the pipeline pairs the decision draw u with 1 - u
                    let ci = randomized_ci(&e, alpha, 1.0 - u).unwrap();
                    checked += 1;
                    if test.rejected() != (ci.selected > 0.0) {
                        disagreements += 1;
                    }
                }
            }
        }
    }
    Verdict::new(disagreements == 0, format!("{checked} cases, {disagreements} disagreements"))
}

fn crossfit_conservative() -> Verdict {
    let alpha = 0.05;
    let mut r = rng(99);
    let hits = (0..REPS as u64)
        .filter(|&rep| {
            let config = TestConfig { seed: rep, ..TestConfig::default() };
            let folds: Vec<FoldResult> = (0..DEFAULT_FOLDS)
                .map(|k| FoldResult::evaluate(k + 1, draw_effects(&mut r, 101, 0.5), &config).unwrap())
                .collect();
            crossfit_minp(&folds, alpha, rep).unwrap().decision == aico::sign_test::Decision::Reject
        })
        .count();
    let f = hits as f64 / REPS as f64;
    let bound = alpha + 3.0 * se(alpha, REPS);
    Verdict::new(f <= bound, format!("K=5 rejection rate {f:.4} (bound {bound:.4})"))
}

fn main() -> ExitCode {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check, Option<Duration>); 9] = [
        ("binomial oracle equivalence", binomial_oracle, Some(Duration::from_secs(10))),
        ("reference binomial numbers", reference_numbers, Some(Duration::from_secs(5))),
        ("exact size", size_exactness, Some(Duration::from_secs(120))),
        ("randomized p-value uniformity", p_value_uniformity, None),
        ("randomized CI coverage", ci_coverage, None),
        ("power agreement", power_agreement, None),
        ("known-truth pipeline", known_truth, Some(Duration::from_secs(120))),
        ("test-CI duality", duality, None),
        ("cross-fitting conservativeness", crossfit_conservative, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let mut v = check();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                v.pass = false;
                v.detail.push_str(&format!(", over the {}s limit", limit.as_secs()));
            }
        }
        failed += usize::from(!v.pass);
        println!(
            "{} {name}: {} [{:.2}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
