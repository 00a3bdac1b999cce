//! Family-wise adjustment and cross-fitting aggregation.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::effects::EffectVector;
use crate::error::{AicoError, Result};
use crate::rng::substream;
use crate::sign_test::{check_alpha, decide, Decision, TestConfig, TestResult};

/// Number of folds used when the caller does not choose.
pub const DEFAULT_FOLDS: usize = 5;

/// Bonferroni-adjusted p-interval `(min(d a, 1), min(d b, 1))`. The
/// matching decision runs the test at level `alpha / d`.
pub fn bonferroni(interval: (f64, f64), d: usize) -> Result<(f64, f64)> {
    if d == 0 {
        return Err(AicoError::Domain("family size must be at least 1".into()));
    }
    let d = d as f64;
    Ok(((d * interval.0).min(1.0), (d * interval.1).min(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub effects: EffectVector,
    pub test: TestResult,
}

impl FoldResult {
    /// Runs the test on one fold's effects.
    pub fn evaluate(fold_index: usize, effects: EffectVector, config: &TestConfig) -> Result<Self> {
        let test = decide(&effects, config)?;
        Ok(Self {
            fold_index,
            effects,
            test,
        })
    }
}

fn sorted_folds(folds: &[FoldResult]) -> Result<Vec<&FoldResult>> {
    if folds.len() < 2 {
        return Err(AicoError::Config(format!(
            "cross-fitting needs at least 2 folds, got {}",
            folds.len()
        )));
    }
    let mut seen = HashSet::new();
    for f in folds {
        if !seen.insert(f.fold_index) {
            return Err(AicoError::Config(format!("duplicate fold index {}", f.fold_index)));
        }
    }
    let mut v: Vec<&FoldResult> = folds.iter().collect();
    v.sort_by_key(|f| f.fold_index);
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedFold {
    pub fold_index: usize,
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinPResult {
    pub feature: String,
    pub folds: Vec<RealizedFold>,
    pub min_p: f64,
    /// `min(1, K * min_k p_k)`.
    pub aggregate_p: f64,
    pub alpha: f64,
    pub decision: Decision,
}

/// Bonferroni-corrected minimum of realized fold p-values.
pub fn minp_from_realized(feature: &str, realized: Vec<RealizedFold>, alpha: f64) -> Result<MinPResult> {
    check_alpha(alpha)?;
    if realized.is_empty() {
        return Err(AicoError::Config("no folds".into()));
    }
    let k = realized.len() as f64;
    let min_p = realized.iter().map(|r| r.p).fold(f64::INFINITY, f64::min);
    let aggregate_p = (k * min_p).min(1.0);
    Ok(MinPResult {
        feature: feature.to_owned(),
        folds: realized,
        min_p,
        aggregate_p,
        alpha,
        decision: if aggregate_p <= alpha { Decision::Reject } else { Decision::Retain },
    })
}

/// Realizes each fold's randomized p-value with a uniform keyed by
/// `(seed, feature, fold index)` and aggregates by `K * min p`.
pub fn crossfit_minp(folds: &[FoldResult], alpha: f64, seed: u64) -> Result<MinPResult> {
    let folds = sorted_folds(folds)?;
    let feature = folds[0].effects.feature().to_owned();
    let realized = folds
        .iter()
        .map(|f| {
            let u: f64 = substream(seed, "crossfit-minp", &format!("{feature}#{}", f.fold_index)).random();
            RealizedFold {
                fold_index: f.fold_index,
                u,
                p: f.test.realized_p(u),
            }
        })
        .collect();
    minp_from_realized(&feature, realized, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledResult {
    pub test: TestResult,
    pub n_folds: usize,
    /// Always true: fold effects share training data, so the pooled test
    /// carries no exactness guarantee.
    pub heuristic: bool,
}

/// Runs the test on the union of all folds' effects.
pub fn crossfit_pooled(folds: &[FoldResult], config: &TestConfig) -> Result<PooledResult> {
    let folds = sorted_folds(folds)?;
    let parts: Vec<&EffectVector> = folds.iter().map(|f| &f.effects).collect();
    let pooled = EffectVector::concat(parts[0].feature(), &parts)?;
    Ok(PooledResult {
        test: decide(&pooled, config)?,
        n_folds: folds.len(),
        heuristic: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(k: usize, values: &[f64]) -> FoldResult {
        let e = EffectVector::from_values("x", values.to_vec()).unwrap();
        FoldResult::evaluate(k, e, &TestConfig::default()).unwrap()
    }

    #[test]
    fn bonferroni_examples() {
        let (a, b) = bonferroni((0.001, 0.002), 19).unwrap();
        assert!((a - 0.019).abs() < 1e-15 && (b - 0.038).abs() < 1e-15);
        assert_eq!(bonferroni((0.2, 0.3), 19).unwrap(), (1.0, 1.0));
        assert_eq!(bonferroni((0.2, 0.3), 1).unwrap(), (0.2, 0.3));
        assert!(bonferroni((0.2, 0.3), 0).is_err());
    }

    #[test]
    fn minp_aggregate() {
        let realized = [0.004, 0.2, 0.5, 0.8, 0.9]
            .iter()
            .enumerate()
            .map(|(k, &p)| RealizedFold { fold_index: k, u: 0.0, p })
            .collect();
        let r = minp_from_realized("x", realized, 0.05).unwrap();
        assert!((r.aggregate_p - 0.02).abs() < 1e-15);
        assert_eq!(r.decision, Decision::Reject);
    }

    #[test]
    fn minp_retains_when_every_fold_is_far_above_alpha() {
        let folds: Vec<_> = (0..5).map(|k| fold(k, &[-1.0; 30])).collect();
        assert!(folds.iter().all(|f| f.test.p_lower > 0.05));
        let r = crossfit_minp(&folds, 0.05, 3).unwrap();
        assert!(r.aggregate_p > 0.05);
        assert_eq!(r.decision, Decision::Retain);
    }

    #[test]
    fn minp_rejects_on_a_decisive_fold() {
        let mut folds: Vec<_> = (0..4).map(|k| fold(k, &[-1.0; 30])).collect();
        folds.push(fold(4, &[1.0; 2000]));
        assert_eq!(folds[4].test.p_upper, 0.0);
        let r = crossfit_minp(&folds, 0.01, 3).unwrap();
        assert_eq!(r.aggregate_p, 0.0);
        assert_eq!(r.decision, Decision::Reject);
    }

    #[test]
    fn minp_ignores_fold_order() {
        let folds: Vec<_> = (0..3).map(|k| fold(k, &[0.5, -0.2, 0.1, 0.3, -0.4])).collect();
        let mut reversed = folds.clone();
        reversed.reverse();
        assert_eq!(crossfit_minp(&folds, 0.05, 9).unwrap(), crossfit_minp(&reversed, 0.05, 9).unwrap());
    }

    #[test]
    fn pooled_concatenates() {
        let folds = vec![fold(0, &[1.0, 2.0]), fold(1, &[3.0])];
        let r = crossfit_pooled(&folds, &TestConfig::default()).unwrap();
        assert_eq!((r.test.n_effective, r.test.n_plus), (3, 3));
        assert!(r.heuristic);
        assert_eq!(r.n_folds, 2);
    }

    #[test]
    fn fold_preconditions() {
        assert!(crossfit_pooled(&[], &TestConfig::default()).is_err());
        assert!(crossfit_minp(&[fold(0, &[1.0])], 0.05, 0).is_err());
        assert!(crossfit_minp(&[fold(1, &[1.0]), fold(1, &[2.0])], 0.05, 0).is_err());
    }
}
