//! Per-sample feature effects.
//!
//! A feature effect is the increase in loss when the feature is masked:
//! `L(f(masked), y) - L(f(unmasked), y)`. Positive effects mean the feature
//! helped that sample's prediction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bundle::BundleView;
use crate::error::{AicoError, Result};
use crate::panel::exclude_missing;

/// Log arguments (`m` and `1 - m`) are floored at `PROB_CLAMP` so that losses
/// stay finite; `ln(1 - m)` is evaluated with `ln_1p` to keep resolution
/// for tiny `m`.
pub const PROB_CLAMP: f64 = 1e-12;

/// Tolerance on probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Label(String),
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(x) => Some(*x),
            FeatureValue::Label(_) => None,
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Number(x) => write!(f, "{x}"),
            FeatureValue::Label(s) => f.write_str(s),
        }
    }
}

impl From<f64> for FeatureValue {
    fn from(x: f64) -> Self {
        FeatureValue::Number(x)
    }
}

impl From<&str> for FeatureValue {
    fn from(s: &str) -> Self {
        FeatureValue::Label(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Discrete,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Admissible values in declared order; required for discrete and
    /// categorical features. The order breaks adjusted-mode ties.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<FeatureValue>>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            support: None,
        }
    }

    pub fn discrete(name: impl Into<String>, support: Vec<FeatureValue>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Discrete,
            support: Some(support),
        }
    }

    pub fn categorical(name: impl Into<String>, support: Vec<FeatureValue>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            support: Some(support),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FeatureKind::Continuous => Ok(()),
            FeatureKind::Discrete | FeatureKind::Categorical => match &self.support {
                Some(s) if !s.is_empty() => Ok(()),
                _ => Err(AicoError::Config(format!(
                    "feature `{}` is {:?} but declares no support",
                    self.name, self.kind
                ))),
            },
        }
    }
}

/// Reference value rule for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    TrainingMean,
    AdjustedMode,
    Fixed(FeatureValue),
}

impl ReferenceRule {
    /// Default rule for a feature kind.
    pub fn for_kind(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Continuous => ReferenceRule::TrainingMean,
            FeatureKind::Discrete | FeatureKind::Categorical => ReferenceRule::AdjustedMode,
        }
    }

    pub fn resolve(
        &self,
        feature: &FeatureSpec,
        training: &[FeatureValue],
        current: Option<&FeatureValue>,
    ) -> Result<FeatureValue> {
        match self {
            ReferenceRule::Fixed(v) => Ok(v.clone()),
            ReferenceRule::TrainingMean => training_mean(feature, training).map(FeatureValue::Number),
            ReferenceRule::AdjustedMode => {
                let current = current.ok_or_else(|| {
                    AicoError::Config(format!(
                        "adjusted mode for `{}` needs the value being masked",
                        feature.name
                    ))
                })?;
                adjusted_mode(feature, training, current)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Mask only the tested feature.
    Conditional,
    /// Mask every feature, then restore only the tested one.
    Unconditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub mode: MaskMode,
    /// One rule per feature, in feature order.
    pub rules: Vec<ReferenceRule>,
}

impl MaskPlan {
    pub fn defaults(mode: MaskMode, features: &[FeatureSpec]) -> Self {
        Self {
            mode,
            rules: features.iter().map(|f| ReferenceRule::for_kind(f.kind)).collect(),
        }
    }

    pub fn validate(&self, features: &[FeatureSpec]) -> Result<()> {
        if self.rules.len() != features.len() {
            return Err(AicoError::Config(format!(
                "mask plan has {} rules for {} features",
                self.rules.len(),
                features.len()
            )));
        }
        for (rule, f) in self.rules.iter().zip(features) {
            f.validate()?;
            let ok = matches!(
                (f.kind, rule),
                (_, ReferenceRule::Fixed(_))
                    | (FeatureKind::Continuous, ReferenceRule::TrainingMean)
                    | (FeatureKind::Discrete | FeatureKind::Categorical, ReferenceRule::AdjustedMode)
            );
            if !ok {
                return Err(AicoError::Config(format!(
                    "rule {rule:?} not allowed for {:?} feature `{}`",
                    f.kind, f.name
                )));
            }
        }
        Ok(())
    }
}

fn training_mean(feature: &FeatureSpec, training: &[FeatureValue]) -> Result<f64> {
    if training.is_empty() {
        return Err(AicoError::Domain(format!(
            "empty training set for `{}`",
            feature.name
        )));
    }
    let mut sum = 0.0;
    for v in training {
        sum += v.as_number().ok_or_else(|| {
            AicoError::Domain(format!(
                "non-numeric training value `{v}` for continuous feature `{}`",
                feature.name
            ))
        })?;
    }
    Ok(sum / training.len() as f64)
}

/// Most frequent training value over `support \ {current}`; ties go to the
/// earliest support entry.
fn adjusted_mode(
    feature: &FeatureSpec,
    training: &[FeatureValue],
    current: &FeatureValue,
) -> Result<FeatureValue> {
    if training.is_empty() {
        return Err(AicoError::Domain(format!(
            "empty training set for `{}`",
            feature.name
        )));
    }
    let support = feature.support.as_deref().unwrap_or_default();
    let mut best: Option<(&FeatureValue, usize)> = None;
    for candidate in support.iter().filter(|v| *v != current) {
        let count = training.iter().filter(|t| *t == candidate).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((candidate, count));
        }
    }
    best.map(|(v, _)| v.clone())
        .ok_or_else(|| AicoError::DegenerateSupport(current.to_string()))
}

/// Training mean for continuous features, adjusted mode for discrete and
/// categorical ones.
pub fn reference_value(
    feature: &FeatureSpec,
    training: &[FeatureValue],
    current: Option<&FeatureValue>,
) -> Result<FeatureValue> {
    ReferenceRule::for_kind(feature.kind).resolve(feature, training, current)
}

/// Returns `(masked, unmasked)` inputs for feature `target`.
///
/// `refs` only needs the target's entry in conditional mode, but every
/// entry in unconditional mode.
pub fn apply_mask(
    x: &[f64],
    mode: MaskMode,
    target: usize,
    refs: &[Option<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if target >= x.len() {
        return Err(AicoError::Domain(format!(
            "target feature {target} outside 0..{}",
            x.len()
        )));
    }
    let reference = |j: usize| refs.get(j).copied().flatten().ok_or(AicoError::MissingReference(j));
    match mode {
        MaskMode::Conditional => {
            let mut masked = x.to_vec();
            masked[target] = reference(target)?;
            Ok((masked, x.to_vec()))
        }
        MaskMode::Unconditional => {
            let masked = (0..x.len()).map(reference).collect::<Result<Vec<_>>>()?;
            let mut unmasked = masked.clone();
            unmasked[target] = x[target];
            Ok((masked, unmasked))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Absolute,
    BinaryCrossEntropy,
    MulticlassCrossEntropy,
    Pinball { tau: f64 },
}

impl std::str::FromStr for LossKind {
    type Err = AicoError;

    /// `squared`, `absolute`, `bce`, `mce`, or `pinball:<tau>`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "squared" => LossKind::Squared,
            "absolute" => LossKind::Absolute,
            "bce" | "binary_cross_entropy" => LossKind::BinaryCrossEntropy,
            "mce" | "multiclass_cross_entropy" => LossKind::MulticlassCrossEntropy,
            other => {
                let tau = other
                    .strip_prefix("pinball:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| AicoError::Config(format!("unknown loss `{other}`")))?;
                LossKind::Pinball { tau }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::Pinball { tau } = self {
            if !(*tau > 0.0 && *tau < 1.0) {
                return Err(AicoError::Config(format!("pinball tau must lie in (0, 1), got {tau}")));
            }
        }
        Ok(())
    }

    pub fn is_multiclass(&self) -> bool {
        matches!(self, LossKind::MulticlassCrossEntropy)
    }
}

fn scalar(values: &[f64], what: &str) -> Result<f64> {
    match values {
        [v] => Ok(*v),
        _ => Err(AicoError::Domain(format!(
            "{what} must be a scalar, got {} values",
            values.len()
        ))),
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_CLAMP).ln()
}

/// `ln(1 - p)` with the same floor on `1 - p`.
fn floored_ln_complement(p: f64) -> f64 {
    (-p.min(1.0 - PROB_CLAMP)).ln_1p()
}

pub(crate) fn check_probability_row(row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(AicoError::MalformedProbabilities(format!(
            "entries outside [0, 1]: {row:?}"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(AicoError::MalformedProbabilities(format!(
            "row sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Loss of one prediction against one response.
///
/// Cross-entropies are negative log-likelihoods (larger is worse). For the
/// multiclass loss the response is either a label vector of the same width
/// as the prediction or a single class index.
pub fn loss(kind: LossKind, prediction: &[f64], response: &[f64]) -> Result<f64> {
    match kind {
        LossKind::Squared => {
            let (m, y) = (scalar(prediction, "prediction")?, scalar(response, "response")?);
            Ok((m - y) * (m - y))
        }
        LossKind::Absolute => {
            let (m, y) = (scalar(prediction, "prediction")?, scalar(response, "response")?);
            Ok((m - y).abs())
        }
        LossKind::Pinball { tau } => {
            let (m, y) = (scalar(prediction, "prediction")?, scalar(response, "response")?);
            Ok(tau * (y - m).max(0.0) + (1.0 - tau) * (m - y).max(0.0))
        }
        LossKind::BinaryCrossEntropy => {
            let (m, y) = (scalar(prediction, "prediction")?, scalar(response, "response")?);
            if !(0.0..=1.0).contains(&m) {
                return Err(AicoError::MalformedProbabilities(format!(
                    "binary prediction {m} outside [0, 1]"
                )));
            }
            let mut nll = 0.0;
            if y != 0.0 {
                nll -= y * floored_ln(m);
            }
            if y != 1.0 {
                nll -= (1.0 - y) * floored_ln_complement(m);
            }
            Ok(nll)
        }
        LossKind::MulticlassCrossEntropy => {
            check_probability_row(prediction)?;
            if response.len() == 1 && prediction.len() > 1 {
                let class = response[0];
                if class.fract() != 0.0 || class < 0.0 || class as usize >= prediction.len() {
                    return Err(AicoError::Domain(format!(
                        "class index {class} outside 0..{}",
                        prediction.len()
                    )));
                }
                return Ok(-floored_ln(prediction[class as usize]));
            }
            if response.len() != prediction.len() {
                return Err(AicoError::Domain(format!(
                    "response width {} does not match prediction width {}",
                    response.len(),
                    prediction.len()
                )));
            }
            Ok(-response
                .iter()
                .zip(prediction)
                .map(|(y, p)| y * floored_ln(*p))
                .sum::<f64>())
        }
    }
}

/// Feature effects for one feature over the retained test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectVector {
    feature: String,
    effects: Vec<f64>,
    sample_ids: Vec<String>,
    n_excluded_missing: usize,
}

impl EffectVector {
    pub fn new(
        feature: impl Into<String>,
        effects: Vec<f64>,
        sample_ids: Vec<String>,
        n_excluded_missing: usize,
    ) -> Result<Self> {
        let feature = feature.into();
        if effects.is_empty() {
            return Err(AicoError::EmptyTestSet(feature));
        }
        if effects.len() != sample_ids.len() {
            return Err(AicoError::Misaligned(format!(
                "{} effects but {} sample ids",
                effects.len(),
                sample_ids.len()
            )));
        }
        if let Some(i) = effects.iter().position(|e| !e.is_finite()) {
            return Err(AicoError::Domain(format!(
                "non-finite effect {} for sample `{}`",
                effects[i], sample_ids[i]
            )));
        }
        Ok(Self {
            feature,
            effects,
            sample_ids,
            n_excluded_missing,
        })
    }

    /// Effects with positional ids `0..n`.
    pub fn from_values(feature: impl Into<String>, effects: Vec<f64>) -> Result<Self> {
        let ids = (0..effects.len()).map(|i| i.to_string()).collect();
        Self::new(feature, effects, ids, 0)
    }

    pub fn feature(&self) -> &str {
        &self.feature
    }

    pub fn values(&self) -> &[f64] {
        &self.effects
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.effects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }

    pub fn n_excluded_missing(&self) -> usize {
        self.n_excluded_missing
    }

    /// Fraction of candidate samples dropped for missingness.
    pub fn missing_rate(&self) -> f64 {
        let total = self.len() + self.n_excluded_missing;
        self.n_excluded_missing as f64 / total as f64
    }

    /// Ascending copy of the effects.
    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.effects.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Concatenation of several vectors, keeping ids.
    pub fn concat(feature: impl Into<String>, parts: &[&EffectVector]) -> Result<Self> {
        let mut effects = Vec::new();
        let mut ids = Vec::new();
        let mut excluded = 0;
        for p in parts {
            effects.extend_from_slice(&p.effects);
            ids.extend(p.sample_ids.iter().cloned());
            excluded += p.n_excluded_missing;
        }
        Self::new(feature, effects, ids, excluded)
    }
}

/// `Δ_i = L(masked_i, y_i) - L(unmasked_i, y_i)` over the view's samples,
/// skipping samples where `feature` is flagged missing.
pub fn compute_effects(view: &BundleView<'_>, feature: &str, loss_kind: LossKind) -> Result<EffectVector> {
    let bundle = view.bundle();
    let masked = bundle.masked(feature)?;
    let retained = exclude_missing(view.rows(), bundle.missing_mask(feature));
    let mut effects = Vec::with_capacity(retained.rows.len());
    let mut ids = Vec::with_capacity(retained.rows.len());
    for &row in &retained.rows {
        let y = bundle.responses().row(row);
        let m = masked.row(row).ok_or_else(|| {
            AicoError::Misaligned(format!(
                "no masked prediction for `{}` in feature `{feature}`",
                bundle.ids()[row]
            ))
        })?;
        let u = bundle.unmasked_row(feature, row).ok_or_else(|| {
            AicoError::Misaligned(format!(
                "no unmasked prediction for `{}` in feature `{feature}`",
                bundle.ids()[row]
            ))
        })?;
        effects.push(loss(loss_kind, m, y)? - loss(loss_kind, u, y)?);
        ids.push(bundle.ids()[row].clone());
    }
    if effects.is_empty() {
        return Err(AicoError::EmptyTestSet(feature.to_owned()));
    }
    EffectVector::new(feature, effects, ids, retained.n_excluded)
}
