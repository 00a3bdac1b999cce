//! Per-feature reports, ranking, and json / csv / text serialization.
//!
//! Machine formats print floats in shortest round-trip form, so a parse of
//! an emitted report yields bit-identical values. Non-finite values (a
//! randomized lower bound may be `-inf`) are written as `inf`, `-inf`,
//! `nan`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::effects::EffectVector;
use crate::error::{AicoError, Result};
use crate::intervals::{CiResult, MedianScore};
use crate::sign_test::{Decision, TestResult};

pub const REPORT_SCHEMA: &str = "aico-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: String,
    /// `None` marks an unranked (retained or failed) feature.
    pub rank: Option<u64>,
    pub status: Status,
    pub error: Option<String>,
    #[serde(with = "opt_float")]
    pub median: Option<f64>,
    pub decision: Option<Decision>,
    #[serde(with = "opt_float")]
    pub reject_prob: Option<f64>,
    #[serde(with = "opt_float")]
    pub p_lower: Option<f64>,
    #[serde(with = "opt_float")]
    pub p_upper: Option<f64>,
    pub n_plus: Option<u64>,
    pub n_effective: Option<u64>,
    pub critical: Option<u64>,
    #[serde(with = "opt_float")]
    pub gamma: Option<f64>,
    #[serde(with = "opt_float")]
    pub decision_u: Option<f64>,
    #[serde(with = "opt_float")]
    pub ci_lower1: Option<f64>,
    #[serde(with = "opt_float")]
    pub ci_lower2: Option<f64>,
    #[serde(with = "opt_float")]
    pub ci_prob_lower1: Option<f64>,
    #[serde(with = "opt_float")]
    pub ci_selected: Option<f64>,
    #[serde(with = "opt_float")]
    pub ts_lower: Option<f64>,
    #[serde(with = "opt_float")]
    pub ts_upper: Option<f64>,
    #[serde(with = "opt_float")]
    pub ts_coverage: Option<f64>,
    pub ts_m: Option<u64>,
    #[serde(with = "opt_float")]
    pub missing_rate: Option<f64>,
    pub n_excluded: Option<u64>,
    /// Level the decision was taken at (after any adjustment).
    #[serde(with = "opt_float")]
    pub alpha: Option<f64>,
}

impl FeatureReport {
    /// Report for a successfully analysed feature. `p_interval` is passed
    /// separately so callers can substitute an adjusted one.
    pub fn analysed(
        effects: &EffectVector,
        test: &TestResult,
        median: MedianScore,
        ci: &CiResult,
        p_interval: (f64, f64),
    ) -> Self {
        let ts = ci.two_sided;
        Self {
            feature: effects.feature().to_owned(),
            rank: None,
            status: Status::Ok,
            error: None,
            median: Some(median.value),
            decision: Some(test.decision),
            reject_prob: Some(test.reject_prob),
            p_lower: Some(p_interval.0),
            p_upper: Some(p_interval.1),
            n_plus: Some(test.n_plus),
            n_effective: Some(test.n_effective),
            critical: Some(test.critical),
            gamma: Some(test.gamma),
            decision_u: Some(test.decision_u),
            ci_lower1: Some(ci.randomized.lower1),
            ci_lower2: Some(ci.randomized.lower2),
            ci_prob_lower1: Some(ci.randomized.prob_lower1),
            ci_selected: Some(ci.randomized.selected),
            ts_lower: ts.map(|t| t.lower),
            ts_upper: ts.map(|t| t.upper),
            ts_coverage: ts.map(|t| t.coverage),
            ts_m: ts.map(|t| t.m_index),
            missing_rate: Some(effects.missing_rate()),
            n_excluded: Some(effects.n_excluded_missing() as u64),
            alpha: Some(test.alpha),
        }
    }

    pub fn failed(feature: impl Into<String>, error: &AicoError) -> Self {
        Self {
            feature: feature.into(),
            rank: None,
            status: Status::Failed,
            error: Some(error.to_string()),
            median: None,
            decision: None,
            reject_prob: None,
            p_lower: None,
            p_upper: None,
            n_plus: None,
            n_effective: None,
            critical: None,
            gamma: None,
            decision_u: None,
            ci_lower1: None,
            ci_lower2: None,
            ci_prob_lower1: None,
            ci_selected: None,
            ts_lower: None,
            ts_upper: None,
            ts_coverage: None,
            ts_m: None,
            missing_rate: None,
            n_excluded: None,
            alpha: None,
        }
    }

    pub fn rejected(&self) -> bool {
        self.status == Status::Ok && self.decision == Some(Decision::Reject)
    }
}

/// Orders reports for display: rejected features by descending median
/// (ranked 1, 2, ...), then all others alphabetically and unranked.
pub fn rank_reports(reports: &mut Vec<FeatureReport>) {
    let (mut ranked, mut rest): (Vec<_>, Vec<_>) = reports.drain(..).partition(FeatureReport::rejected);
    ranked.sort_by(|a, b| {
        let (ma, mb) = (a.median.unwrap_or(f64::NAN), b.median.unwrap_or(f64::NAN));
        mb.total_cmp(&ma).then_with(|| a.feature.cmp(&b.feature))
    });
    rest.sort_by(|a, b| a.feature.cmp(&b.feature));
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = Some(i as u64 + 1);
    }
    for r in rest.iter_mut() {
        r.rank = None;
    }
    reports.extend(ranked);
    reports.extend(rest);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub features: Vec<FeatureReport>,
}

impl Report {
    pub fn new(features: Vec<FeatureReport>) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_owned(),
            features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = AicoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text" | "table" | "text-table" => Ok(ReportFormat::Text),
            other => Err(AicoError::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn emit_report(reports: &[FeatureReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&Report::new(reports.to_vec()))
                .map_err(|e| AicoError::Report(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => emit_csv(reports),
        ReportFormat::Text => Ok(emit_text(reports)),
    }
}

pub fn parse_report_json(text: &str) -> Result<Report> {
    let report: Report = serde_json::from_str(text).map_err(|e| AicoError::Report(e.to_string()))?;
    if report.schema != REPORT_SCHEMA {
        return Err(AicoError::Report(format!("unsupported schema `{}`", report.schema)));
    }
    Ok(report)
}

const CSV_COLUMNS: [&str; 26] = [
    "feature",
    "rank",
    "status",
    "error",
    "median",
    "decision",
    "reject_prob",
    "p_lower",
    "p_upper",
    "n_plus",
    "n_effective",
    "critical",
    "gamma",
    "decision_u",
    "ci_lower1",
    "ci_lower2",
    "ci_prob_lower1",
    "ci_selected",
    "ts_lower",
    "ts_upper",
    "ts_coverage",
    "ts_m",
    "missing_rate",
    "n_excluded",
    "alpha",
    "schema",
];

fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

fn parse_float(s: &str) -> Result<f64> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| AicoError::Report(format!("bad number `{s}`"))),
    }
}

fn decision_str(d: Decision) -> &'static str {
    match d {
        Decision::Reject => "reject",
        Decision::Retain => "retain",
    }
}

fn emit_csv(reports: &[FeatureReport]) -> Result<String> {
    let f = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
    let n = |x: Option<u64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| AicoError::Report(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for r in reports {
        w.write_record([
            r.feature.clone(),
            n(r.rank),
            match r.status {
                Status::Ok => "ok".into(),
                Status::Failed => "failed".into(),
            },
            r.error.clone().unwrap_or_default(),
            f(r.median),
            r.decision.map(decision_str).unwrap_or_default().into(),
            f(r.reject_prob),
            f(r.p_lower),
            f(r.p_upper),
            n(r.n_plus),
            n(r.n_effective),
            n(r.critical),
            f(r.gamma),
            f(r.decision_u),
            f(r.ci_lower1),
            f(r.ci_lower2),
            f(r.ci_prob_lower1),
            f(r.ci_selected),
            f(r.ts_lower),
            f(r.ts_upper),
            f(r.ts_coverage),
            n(r.ts_m),
            f(r.missing_rate),
            n(r.n_excluded),
            f(r.alpha),
            REPORT_SCHEMA.into(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| AicoError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AicoError::Report(e.to_string()))
}

pub fn parse_report_csv(text: &str) -> Result<Report> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| AicoError::Report(e.to_string()))?.clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(AicoError::Report("unexpected csv header".into()));
    }
    let mut features = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| AicoError::Report(e.to_string()))?;
        let line = i + 2;
        let ctx = |e: AicoError| AicoError::Report(format!("line {line}: {e}"));
        let get = |k: usize| rec.get(k).unwrap_or("");
        let f = |k: usize| -> Result<Option<f64>> {
            match get(k) {
                "" => Ok(None),
                s => parse_float(s).map(Some),
            }
        };
        let n = |k: usize| -> Result<Option<u64>> {
            match get(k) {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|_| AicoError::Report(format!("bad count `{s}`"))),
            }
        };
        if get(25) != REPORT_SCHEMA {
            return Err(ctx(AicoError::Report(format!("unsupported schema `{}`", get(25)))));
        }
        let report = (|| -> Result<FeatureReport> {
            Ok(FeatureReport {
                feature: get(0).to_owned(),
                rank: n(1)?,
                status: match get(2) {
                    "ok" => Status::Ok,
                    "failed" => Status::Failed,
                    s => return Err(AicoError::Report(format!("bad status `{s}`"))),
                },
                error: Some(get(3)).filter(|s| !s.is_empty()).map(str::to_owned),
                median: f(4)?,
                decision: match get(5) {
                    "" => None,
                    "reject" => Some(Decision::Reject),
                    "retain" => Some(Decision::Retain),
                    s => return Err(AicoError::Report(format!("bad decision `{s}`"))),
                },
                reject_prob: f(6)?,
                p_lower: f(7)?,
                p_upper: f(8)?,
                n_plus: n(9)?,
                n_effective: n(10)?,
                critical: n(11)?,
                gamma: f(12)?,
                decision_u: f(13)?,
                ci_lower1: f(14)?,
                ci_lower2: f(15)?,
                ci_prob_lower1: f(16)?,
                ci_selected: f(17)?,
                ts_lower: f(18)?,
                ts_upper: f(19)?,
                ts_coverage: f(20)?,
                ts_m: n(21)?,
                missing_rate: f(22)?,
                n_excluded: n(23)?,
                alpha: f(24)?,
            })
        })()
        .map_err(ctx)?;
        features.push(report);
    }
    Ok(Report::new(features))
}

fn emit_text(reports: &[FeatureReport]) -> String {
    let num = |x: Option<f64>| match x {
        Some(v) if v.is_finite() => format!("{v:.4}"),
        Some(v) if v > 0.0 => "inf".into(),
        Some(v) if v < 0.0 => "-inf".into(),
        Some(_) => "nan".into(),
        None => "-".into(),
    };
    let header = [
        "Rank",
        "Feature",
        "Median",
        "Reject prob",
        "p-value interval",
        "Randomized one-sided CI",
        "Two-sided CI",
        "Coverage",
        "N",
        "Missing",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let rank = r.rank.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
        if r.status == Status::Failed {
            let mut row = vec![rank, r.feature.clone()];
            row.push(format!("FAILED: {}", r.error.as_deref().unwrap_or("unknown error")));
            rows.push(row);
            continue;
        }
        let ci = format!(
            "[{}, inf) w.p. {} / [{}, inf)",
            num(r.ci_lower1),
            num(r.ci_prob_lower1),
            num(r.ci_lower2)
        );
        let ts = match (r.ts_lower, r.ts_upper) {
            (Some(_), Some(_)) => format!("[{}, {}]", num(r.ts_lower), num(r.ts_upper)),
            _ => "-".into(),
        };
        rows.push(vec![
            rank,
            r.feature.clone(),
            num(r.median),
            num(r.reject_prob),
            format!("({}, {})", fmt_p(r.p_lower), fmt_p(r.p_upper)),
            ci,
            ts,
            num(r.ts_coverage),
            r.n_effective.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            num(r.missing_rate),
        ]);
    }
    let cols = header.len();
    let mut widths = vec![0usize; cols];
    for row in &rows {
        if row.len() == cols {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
    }
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j + 1 < row.len() { format!("{c:<w$}", w = widths[j]) } else { c.clone() })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        Some(v) if v != 0.0 && v < 1e-4 => format!("{v:.2e}"),
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

mod opt_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            None => s.serialize_none(),
            Some(v) if v.is_finite() => s.serialize_f64(*v),
            Some(v) => s.serialize_str(&super::fmt_float(*v)),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(v)) => Ok(Some(v)),
            Some(Repr::Text(s)) => super::parse_float(&s).map(Some).map_err(serde::de::Error::custom),
        }
    }
}
