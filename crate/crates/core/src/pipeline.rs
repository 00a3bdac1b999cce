//! End-to-end feature testing: effects, decision, median, intervals, report.
//!
//! Features run in parallel. Every random draw is keyed by `(seed,
//! feature)`, so results do not depend on the schedule.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleView, LoadedBundle};
use crate::crossfit::{bonferroni, crossfit_minp, crossfit_pooled, FoldResult, MinPResult};
use crate::effects::{compute_effects, EffectVector, LossKind};
use crate::error::{AicoError, Result};
use crate::intervals::{confidence_intervals, median_score};
use crate::panel::{group_effects, TrajectoryAggregator, TrajectoryLossSpec};
use crate::report::{rank_reports, FeatureReport};
use crate::sign_test::{decide, TestConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjust {
    #[default]
    None,
    Bonferroni,
}

impl FromStr for Adjust {
    type Err = AicoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Adjust::None),
            "bonferroni" => Ok(Adjust::Bonferroni),
            other => Err(AicoError::Config(format!("unknown adjustment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub test: TestConfig,
    /// Overrides the manifest's training loss.
    pub loss: Option<LossKind>,
    pub adjust: Adjust,
    /// Test units instead of samples, aggregating each unit's trajectory.
    pub grouping: Option<TrajectoryAggregator>,
}

/// Test, median and both intervals for one effect vector, at level
/// `alpha / family` with the p-interval Bonferroni-scaled by `family`.
///
/// The randomized interval reuses the test's uniform as `1 - u`, so it
/// excludes `m0` exactly when the test rejects.
pub fn analyse_effects(effects: &EffectVector, config: &TestConfig, family: usize) -> Result<FeatureReport> {
    if family == 0 {
        return Err(AicoError::Domain("family size must be at least 1".into()));
    }
    let level = TestConfig {
        alpha: config.alpha / family as f64,
        ..*config
    };
    let test = decide(effects, &level)?;
    let ci = confidence_intervals(effects, level.alpha, 1.0 - test.decision_u)?;
    let interval = bonferroni((test.p_lower, test.p_upper), family)?;
    Ok(FeatureReport::analysed(effects, &test, median_score(effects), &ci, interval))
}

fn feature_effects(view: &BundleView<'_>, feature: &str, run: &RunConfig) -> Result<EffectVector> {
    let loss = run.loss.unwrap_or(view.bundle().manifest().loss);
    match run.grouping {
        None => compute_effects(view, feature, loss),
        Some(aggregator) => group_effects(
            view,
            feature,
            TrajectoryLossSpec {
                per_period: loss,
                aggregator,
            },
        ),
    }
}

fn check_features(view: &BundleView<'_>, features: &[String]) -> Result<()> {
    let manifest = view.bundle().manifest();
    for (i, f) in features.iter().enumerate() {
        if manifest.feature(f).is_none() {
            return Err(AicoError::UnknownFeature(f.clone()));
        }
        if features[..i].contains(f) {
            return Err(AicoError::Config(format!("feature `{f}` requested twice")));
        }
    }
    Ok(())
}

fn run_features(
    view: &BundleView<'_>,
    features: &[String],
    run: &RunConfig,
    load_errors: Option<&BTreeMap<String, AicoError>>,
) -> Result<Vec<FeatureReport>> {
    run.test.validate()?;
    check_features(view, features)?;
    let family = match run.adjust {
        Adjust::None => 1,
        Adjust::Bonferroni => features.len().max(1),
    };
    let mut reports: Vec<FeatureReport> = features
        .par_iter()
        .map(|f| {
            if let Some(e) = load_errors.and_then(|m| m.get(f)) {
                return FeatureReport::failed(f.clone(), e);
            }
            feature_effects(view, f, run)
                .and_then(|e| analyse_effects(&e, &run.test, family))
                .unwrap_or_else(|e| FeatureReport::failed(f.clone(), &e))
        })
        .collect();
    rank_reports(&mut reports);
    Ok(reports)
}

/// Tests `features` on the samples of `view`. A failure in one feature is
/// recorded in its report and does not affect the others.
pub fn run_test(view: &BundleView<'_>, features: &[String], run: &RunConfig) -> Result<Vec<FeatureReport>> {
    run_features(view, features, run, None)
}

/// Like [`run_test`] for a leniently loaded bundle: features whose tables
/// failed to load are reported as failed with the load error. `features`
/// defaults to every manifest feature.
pub fn run_loaded(
    loaded: &LoadedBundle,
    view: &BundleView<'_>,
    features: Option<&[String]>,
    run: &RunConfig,
) -> Result<Vec<FeatureReport>> {
    let all: Vec<String>;
    let features = match features {
        Some(f) => f,
        None => {
            all = loaded.bundle.manifest().feature_names().map(str::to_owned).collect();
            &all
        }
    };
    run_features(view, features, run, Some(&loaded.feature_errors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossfitScheme {
    MinP,
    Pooled,
}

impl FromStr for CrossfitScheme {
    type Err = AicoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minp" | "min-p" => Ok(CrossfitScheme::MinP),
            "pooled" => Ok(CrossfitScheme::Pooled),
            other => Err(AicoError::Config(format!("unknown cross-fitting scheme `{other}`"))),
        }
    }
}

/// Cross-fitted result for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfitReport {
    pub feature: String,
    pub scheme: CrossfitScheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minp: Option<MinPResult>,
    /// Test and intervals on the pooled effects.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled: Option<FeatureReport>,
    /// Set for the pooled scheme, which has no exactness guarantee.
    pub heuristic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn crossfit_feature(
    folds: &[LoadedBundle],
    feature: &str,
    scheme: CrossfitScheme,
    run: &RunConfig,
    family: usize,
) -> Result<CrossfitReport> {
    let level = TestConfig {
        alpha: run.test.alpha / family as f64,
        ..run.test
    };
    let mut results = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        if let Some(e) = fold.feature_errors.get(feature) {
            return Err(AicoError::Config(format!("fold {}: {e}", k + 1)));
        }
        let effects = feature_effects(&fold.bundle.view(), feature, run)
            .map_err(|e| AicoError::Config(format!("fold {}: {e}", k + 1)))?;
        results.push(FoldResult::evaluate(k + 1, effects, &level)?);
    }
    match scheme {
        CrossfitScheme::MinP => Ok(CrossfitReport {
            feature: feature.to_owned(),
            scheme,
            minp: Some(crossfit_minp(&results, level.alpha, level.seed)?),
            pooled: None,
            heuristic: false,
            error: None,
        }),
        CrossfitScheme::Pooled => {
            let pooled = crossfit_pooled(&results, &level)?;
            let parts: Vec<&EffectVector> = results.iter().map(|f| &f.effects).collect();
            let effects = EffectVector::concat(feature, &parts)?;
            let report = analyse_effects(&effects, &run.test, family)?;
            debug_assert_eq!(report.decision, Some(pooled.test.decision));
            Ok(CrossfitReport {
                feature: feature.to_owned(),
                scheme,
                minp: None,
                pooled: Some(report),
                heuristic: pooled.heuristic,
                error: None,
            })
        }
    }
}

/// Aggregates per-fold tests of every feature. Fold `k` (1-based) is the
/// `k`-th bundle; each must have been produced by a model that never saw
/// its samples.
pub fn run_crossfit(
    folds: &[LoadedBundle],
    features: &[String],
    scheme: CrossfitScheme,
    run: &RunConfig,
) -> Result<Vec<CrossfitReport>> {
    run.test.validate()?;
    if folds.len() < 2 {
        return Err(AicoError::Config(format!(
            "cross-fitting needs at least 2 fold bundles, got {}",
            folds.len()
        )));
    }
    for fold in folds {
        check_features(&fold.bundle.view(), features)?;
    }
    let family = match run.adjust {
        Adjust::None => 1,
        Adjust::Bonferroni => features.len().max(1),
    };
    Ok(features
        .par_iter()
        .map(|f| {
            crossfit_feature(folds, f, scheme, run, family).unwrap_or_else(|e| CrossfitReport {
                feature: f.clone(),
                scheme,
                minp: None,
                pooled: None,
                heuristic: scheme == CrossfitScheme::Pooled,
                error: Some(e.to_string()),
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{BundleParts, Manifest, MaskedTable, PredictionBundle, Table};
    use crate::effects::{FeatureSpec, MaskMode};
    use crate::report::Status;
    use crate::sign_test::Decision;

    /// `same` is masked with the unmasked predictions; `big` with
    /// predictions far from every response.
    fn bundle(n: usize) -> PredictionBundle {
        let manifest = Manifest::new(
            vec![FeatureSpec::continuous("same"), FeatureSpec::continuous("big")],
            LossKind::Squared,
            MaskMode::Conditional,
        );
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let pred: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
        let col = |v: &[f64]| Table::from_rows(1, v.iter().map(|x| [*x])).unwrap();
        PredictionBundle::from_parts(BundleParts {
            manifest,
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            responses: col(&y),
            unmasked: col(&pred),
            masked: BTreeMap::from([
                ("same".to_owned(), MaskedTable::full(col(&pred))),
                (
                    "big".to_owned(),
                    MaskedTable::full(col(&y.iter().map(|v| v + 5.0).collect::<Vec<_>>())),
                ),
            ]),
            restored: BTreeMap::new(),
            missing: BTreeMap::new(),
            panel: None,
            raw: BTreeMap::new(),
        })
        .unwrap()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_effects_are_retained_with_median_zero() {
        let b = bundle(40);
        let r = run_test(&b.view(), &names(&["same"]), &RunConfig::default()).unwrap();
        assert_eq!(r[0].n_plus, Some(0));
        assert_eq!(r[0].decision, Some(Decision::Retain));
        assert_eq!(r[0].median, Some(0.0));
        assert_eq!(r[0].rank, None);
    }

    #[test]
    fn bonferroni_halves_level_and_doubles_interval() {
        let b = bundle(40);
        let plain = run_test(&b.view(), &names(&["big", "same"]), &RunConfig::default()).unwrap();
        let adj = run_test(
            &b.view(),
            &names(&["big", "same"]),
            &RunConfig {
                adjust: Adjust::Bonferroni,
                ..RunConfig::default()
            },
        )
        .unwrap();
        for (p, a) in plain.iter().zip(&adj) {
            assert_eq!(p.feature, a.feature);
            assert_eq!(a.alpha, Some(0.025));
            assert_eq!(a.p_lower, Some((2.0 * p.p_lower.unwrap()).min(1.0)));
            assert_eq!(a.p_upper, Some((2.0 * p.p_upper.unwrap()).min(1.0)));
        }
        assert_eq!(adj[0].feature, "big");
        assert_eq!(adj[0].rank, Some(1));
        assert_eq!(adj[1].p_upper, Some(1.0));
    }

    #[test]
    fn unknown_feature_is_fatal() {
        let b = bundle(5);
        assert!(run_test(&b.view(), &names(&["nope"]), &RunConfig::default()).is_err());
        assert!(run_test(&b.view(), &names(&["big", "big"]), &RunConfig::default()).is_err());
    }

    #[test]
    fn per_feature_errors_are_isolated() {
        // an empty test set for one feature must not affect the other
        let b = bundle(30);
        let run = RunConfig {
            test: TestConfig {
                tie_mode: crate::sign_test::TieMode::Drop,
                ..TestConfig::default()
            },
            ..RunConfig::default()
        };
        let r = run_test(&b.view(), &names(&["same", "big"]), &run).unwrap();
        let same = r.iter().find(|x| x.feature == "same").unwrap();
        let big = r.iter().find(|x| x.feature == "big").unwrap();
        assert_eq!(same.status, Status::Failed);
        assert_eq!(big.decision, Some(Decision::Reject));
    }

    #[test]
    fn ci_agrees_with_decision() {
        let b = bundle(60);
        for seed in 0..20 {
            let run = RunConfig {
                test: TestConfig { seed, ..TestConfig::default() },
                ..RunConfig::default()
            };
            for r in run_test(&b.view(), &names(&["big", "same"]), &run).unwrap() {
                let rejected = r.decision == Some(Decision::Reject);
                assert_eq!(rejected, r.ci_selected.unwrap() > 0.0, "{r:?}");
            }
        }
    }

    #[test]
    fn crossfit_over_bundles() {
        let folds: Vec<LoadedBundle> = (0..3)
            .map(|_| LoadedBundle {
                bundle: bundle(25),
                feature_errors: BTreeMap::new(),
            })
            .collect();
        let r = run_crossfit(&folds, &names(&["big", "same"]), CrossfitScheme::MinP, &RunConfig::default()).unwrap();
        assert_eq!(r[0].minp.as_ref().unwrap().decision, Decision::Reject);
        assert_eq!(r[1].minp.as_ref().unwrap().decision, Decision::Retain);
        let r = run_crossfit(&folds, &names(&["big"]), CrossfitScheme::Pooled, &RunConfig::default()).unwrap();
        let pooled = r[0].pooled.as_ref().unwrap();
        assert!(r[0].heuristic);
        assert_eq!(pooled.n_effective, Some(75));
        assert!(run_crossfit(&folds[..1], &names(&["big"]), CrossfitScheme::MinP, &RunConfig::default()).is_err());
    }
}
