//! Panel data and missing values.
//!
//! Dependent samples are handled either by conditioning (restricting the
//! test set to a subset of approximately independent samples, e.g. one
//! period) or by grouping (one trajectory-level effect per unit). Missing
//! feature values are excluded feature-wise: testing feature `l` drops only
//! the samples where `l` itself is missing.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::BundleView;
use crate::effects::{loss, EffectVector, FeatureKind, FeatureSpec, FeatureValue, LossKind};
use crate::error::{AicoError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PanelKey {
    pub unit: String,
    pub time: i64,
}

impl PanelKey {
    pub fn new(unit: impl Into<String>, time: i64) -> Self {
        Self {
            unit: unit.into(),
            time,
        }
    }
}

/// Samples kept after feature-wise missing-data exclusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retained {
    pub rows: Vec<usize>,
    pub n_excluded: usize,
}

/// Drops the rows flagged in `mask`; retained rows keep their order.
pub fn exclude_missing(rows: &[usize], mask: Option<&[bool]>) -> Retained {
    match mask {
        None => Retained {
            rows: rows.to_vec(),
            n_excluded: 0,
        },
        Some(mask) => {
            let kept: Vec<usize> = rows.iter().copied().filter(|&r| !mask[r]).collect();
            Retained {
                n_excluded: rows.len() - kept.len(),
                rows: kept,
            }
        }
    }
}

/// Declarative sample filter over panel keys and raw feature columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    All,
    TimeEq(i64),
    /// Inclusive on both ends.
    TimeRange(i64, i64),
    UnitIn(Vec<String>),
    ColumnEq { column: String, value: String },
    And(Vec<Predicate>),
}

impl FromStr for Predicate {
    type Err = AicoError;

    /// Comma-separated conjunction of `time=T`, `time=A..B`, `unit=U1|U2`,
    /// `COLUMN=VALUE` or `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for term in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if term == "all" {
                terms.push(Predicate::All);
                continue;
            }
            let (key, value) = term
                .split_once('=')
                .ok_or_else(|| AicoError::Config(format!("predicate term `{term}` lacks `=`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad_time = || AicoError::Config(format!("bad time in `{term}`"));
            terms.push(match key {
                "time" => match value.split_once("..") {
                    Some((a, b)) => Predicate::TimeRange(
                        a.trim().parse().map_err(|_| bad_time())?,
                        b.trim().parse().map_err(|_| bad_time())?,
                    ),
                    None => Predicate::TimeEq(value.parse().map_err(|_| bad_time())?),
                },
                "unit" => Predicate::UnitIn(value.split('|').map(str::to_owned).collect()),
                column => Predicate::ColumnEq {
                    column: column.to_owned(),
                    value: value.to_owned(),
                },
            });
        }
        Ok(match terms.len() {
            0 => Predicate::All,
            1 => terms.pop().unwrap(),
            _ => Predicate::And(terms),
        })
    }
}

impl Predicate {
    fn matches(&self, view: &BundleView<'_>, row: usize) -> Result<bool> {
        let bundle = view.bundle();
        let key = || {
            bundle
                .panel_keys()
                .map(|k| &k[row])
                .ok_or_else(|| AicoError::Config("predicate needs panel keys but the bundle has none".into()))
        };
        Ok(match self {
            Predicate::All => true,
            Predicate::TimeEq(t) => key()?.time == *t,
            Predicate::TimeRange(a, b) => (*a..=*b).contains(&key()?.time),
            Predicate::UnitIn(units) => units.contains(&key()?.unit),
            Predicate::ColumnEq { column, value } => {
                let col = bundle
                    .raw_column(column)
                    .ok_or_else(|| AicoError::Config(format!("no raw feature column `{column}`")))?;
                col[row] == *value
            }
            Predicate::And(ps) => {
                for p in ps {
                    if !p.matches(view, row)? {
                        return Ok(false);
                    }
                }
                true
            }
        })
    }
}

/// Restricts a view to the samples matching `predicate`.
pub fn condition_subset<'a>(view: &BundleView<'a>, predicate: &Predicate) -> Result<BundleView<'a>> {
    let mut rows = Vec::new();
    for &r in view.rows() {
        if predicate.matches(view, r)? {
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(AicoError::EmptyTestSet(format!("selection {predicate:?}")));
    }
    Ok(BundleView::new(view.bundle(), rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryAggregator {
    Mean,
    Max,
}

/// Trajectory-level loss: a per-period loss aggregated over a unit's
/// retained periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLossSpec {
    pub per_period: LossKind,
    pub aggregator: TrajectoryAggregator,
}

impl TrajectoryLossSpec {
    /// Aggregates losses already sorted by period.
    fn aggregate(&self, losses: &[f64]) -> f64 {
        match self.aggregator {
            TrajectoryAggregator::Mean => losses.iter().sum::<f64>() / losses.len() as f64,
            TrajectoryAggregator::Max => losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One effect per unit: trajectory loss under masking minus trajectory
/// loss unmasked. Periods where `feature` is missing are dropped from the
/// unit's trajectory; units left with no periods are dropped and counted in
/// `n_excluded_missing`. Units appear in order of first occurrence.
pub fn group_effects(view: &BundleView<'_>, feature: &str, spec: TrajectoryLossSpec) -> Result<EffectVector> {
    let bundle = view.bundle();
    let keys = bundle
        .panel_keys()
        .ok_or_else(|| AicoError::Config("grouping needs panel keys".into()))?;
    let masked = bundle.masked(feature)?;
    let missing = bundle.missing_mask(feature);

    let mut order: Vec<&str> = Vec::new();
    let mut periods: HashMap<&str, Vec<(i64, f64, f64)>> = HashMap::new();
    for &row in view.rows() {
        let unit = keys[row].unit.as_str();
        let entry = periods.entry(unit).or_insert_with(|| {
            order.push(unit);
            Vec::new()
        });
        if missing.is_some_and(|m| m[row]) {
            continue;
        }
        let y = bundle.responses().row(row);
        let m = masked.row(row).ok_or_else(|| {
            AicoError::Misaligned(format!("no masked prediction for `{}`", bundle.ids()[row]))
        })?;
        let lm = loss(spec.per_period, m, y)?;
        let u = bundle.unmasked_row(feature, row).ok_or_else(|| {
            AicoError::Misaligned(format!("no unmasked prediction for `{}`", bundle.ids()[row]))
        })?;
        let lu = loss(spec.per_period, u, y)?;
        entry.push((keys[row].time, lm, lu));
    }

    let mut effects = Vec::with_capacity(order.len());
    let mut ids = Vec::with_capacity(order.len());
    let mut excluded = 0;
    for unit in order {
        let mut p = periods.remove(unit).unwrap_or_default();
        if p.is_empty() {
            excluded += 1;
            continue;
        }
        p.sort_by_key(|&(t, _, _)| t);
        let lm: Vec<f64> = p.iter().map(|x| x.1).collect();
        let lu: Vec<f64> = p.iter().map(|x| x.2).collect();
        effects.push(spec.aggregate(&lm) - spec.aggregate(&lu));
        ids.push(unit.to_owned());
    }
    if effects.is_empty() {
        return Err(AicoError::EmptyTestSet(feature.to_owned()));
    }
    EffectVector::new(feature, effects, ids, excluded)
}

fn mode_of(values: &[&FeatureValue], support: Option<&[FeatureValue]>) -> FeatureValue {
    // distinct values in a deterministic order: support order first, then
    // first appearance
    let mut candidates: Vec<&FeatureValue> = Vec::new();
    if let Some(s) = support {
        candidates.extend(s.iter().filter(|v| values.contains(v)));
    }
    for v in values {
        if !candidates.contains(v) {
            candidates.push(v);
        }
    }
    let mut best = candidates[0];
    let mut best_count = 0;
    for c in candidates {
        let count = values.iter().filter(|v| **v == c).count();
        if count > best_count {
            best = c;
            best_count = count;
        }
    }
    best.clone()
}

/// Per-unit aggregates of a training panel (mean for continuous features,
/// mode otherwise), one per unit in order of first occurrence. Feeding the
/// result to [`crate::effects::reference_value`] weights units equally
/// regardless of how many periods each contributes.
pub fn two_step_reference(training: &[(String, FeatureValue)], feature: &FeatureSpec) -> Result<Vec<FeatureValue>> {
    if training.is_empty() {
        return Err(AicoError::Domain(format!("empty training panel for `{}`", feature.name)));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&FeatureValue>> = HashMap::new();
    for (unit, value) in training {
        groups
            .entry(unit.as_str())
            .or_insert_with(|| {
                order.push(unit.as_str());
                Vec::new()
            })
            .push(value);
    }
    order
        .into_iter()
        .map(|unit| {
            let values = &groups[unit];
            match feature.kind {
                FeatureKind::Continuous => {
                    let mut sum = 0.0;
                    for v in values {
                        sum += v.as_number().ok_or_else(|| {
                            AicoError::Domain(format!("non-numeric value `{v}` for `{}`", feature.name))
                        })?;
                    }
                    Ok(FeatureValue::Number(sum / values.len() as f64))
                }
                FeatureKind::Discrete | FeatureKind::Categorical => {
                    Ok(mode_of(values, feature.support.as_deref()))
                }
            }
        })
        .collect()
}
