//! Prediction bundles: the on-disk interface between a model and the tests.
//!
//! A bundle is a directory:
//!
//! ```text
//! manifest.json          schema id, features, loss, masking mode, defaults
//! responses.csv          id, response column(s)
//! unmasked.csv           id, prediction column(s)
//! masked/<feature>.csv   id, prediction column(s) with `feature` masked
//! unmasked/<feature>.csv required under unconditional masking: every
//!                        feature masked except `feature`
//! missing.csv            optional: id, one 0/1 column per feature
//! panel.csv              optional: id, unit, time
//! features.csv           optional: id, raw feature columns (text)
//! ```
//!
//! Tables are UTF-8 CSV with a header row and the sample id first. The
//! sample order of `responses.csv` is canonical; every other table is
//! aligned to it by id. A per-feature table may omit exactly the ids that
//! `missing.csv` flags for its feature.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::effects::{check_probability_row, FeatureSpec, FeatureValue, LossKind, MaskMode};
use crate::error::{AicoError, Result};
use crate::panel::PanelKey;

pub const BUNDLE_SCHEMA: &str = "aico-bundle/1";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESPONSES_FILE: &str = "responses.csv";
pub const UNMASKED_FILE: &str = "unmasked.csv";
pub const MISSING_FILE: &str = "missing.csv";
pub const PANEL_FILE: &str = "panel.csv";
pub const RAW_FEATURES_FILE: &str = "features.csv";
pub const MASKED_DIR: &str = "masked";
pub const RESTORED_DIR: &str = "unmasked";

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFeature {
    #[serde(flatten)]
    pub spec: FeatureSpec,
    /// Masked-prediction table, relative to the bundle root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    /// Per-feature unmasked table, relative to the bundle root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restored_file: Option<String>,
    /// Training-derived reference value, informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<FeatureValue>,
}

impl ManifestFeature {
    pub fn new(spec: FeatureSpec) -> Self {
        Self {
            spec,
            file: None,
            restored_file: None,
            reference: None,
        }
    }

    pub fn masked_path(&self) -> String {
        self.file
            .clone()
            .unwrap_or_else(|| format!("{MASKED_DIR}/{}.csv", file_stem(&self.spec.name)))
    }

    pub fn restored_path(&self) -> String {
        self.restored_file
            .clone()
            .unwrap_or_else(|| format!("{RESTORED_DIR}/{}.csv", file_stem(&self.spec.name)))
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub features: Vec<ManifestFeature>,
    /// Loss the model was trained with; the default test loss.
    pub loss: LossKind,
    pub masking: MaskMode,
    #[serde(default)]
    pub panel: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub m0: f64,
}

impl Manifest {
    pub fn new(features: Vec<FeatureSpec>, loss: LossKind, masking: MaskMode) -> Self {
        Self {
            schema: BUNDLE_SCHEMA.to_owned(),
            features: features.into_iter().map(ManifestFeature::new).collect(),
            loss,
            masking,
            panel: false,
            alpha: default_alpha(),
            m0: 0.0,
        }
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.spec.name.as_str())
    }

    pub fn feature(&self, name: &str) -> Option<&ManifestFeature> {
        self.features.iter().find(|f| f.spec.name == name)
    }

    fn validate(&self) -> Result<()> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(AicoError::Config(format!(
                "unsupported bundle schema `{}`, expected `{BUNDLE_SCHEMA}`",
                self.schema
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            f.spec.validate()?;
            if !seen.insert(f.spec.name.as_str()) {
                return Err(AicoError::Config(format!("duplicate feature `{}`", f.spec.name)));
            }
        }
        let mut paths = HashSet::new();
        for f in &self.features {
            for path in [f.masked_path(), f.restored_path()] {
                if !paths.insert(path.clone()) {
                    return Err(AicoError::Config(format!("table path `{path}` used twice")));
                }
            }
        }
        self.loss.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AicoError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !self.m0.is_finite() {
            return Err(AicoError::Config("m0 must be finite".into()));
        }
        Ok(())
    }
}

/// Row-major numeric table in canonical sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    width: usize,
    values: Vec<f64>,
}

impl Table {
    pub fn new(width: usize) -> Self {
        assert!(width > 0, "table width must be positive");
        Self {
            width,
            values: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(width: usize, rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut t = Self::new(width);
        for r in rows {
            t.push(r.as_ref())?;
        }
        Ok(t)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.width {
            return Err(AicoError::Misaligned(format!(
                "row has {} values, table width is {}",
                row.len(),
                self.width
            )));
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

/// Masked predictions aligned to the canonical order; absent rows are the
/// ones declared missing.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTable {
    table: Table,
    present: Vec<bool>,
}

impl MaskedTable {
    /// Every row present.
    pub fn full(table: Table) -> Self {
        let present = vec![true; table.len()];
        Self { table, present }
    }

    /// Rows given as `None` are absent.
    pub fn from_options(width: usize, rows: &[Option<Vec<f64>>]) -> Result<Self> {
        let mut table = Table::new(width);
        let mut present = Vec::with_capacity(rows.len());
        let filler = vec![f64::NAN; width];
        for r in rows {
            match r {
                Some(v) => table.push(v)?,
                None => table.push(&filler)?,
            }
            present.push(r.is_some());
        }
        Ok(Self { table, present })
    }

    pub fn width(&self) -> usize {
        self.table.width
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.present[i].then(|| self.table.row(i))
    }
}

/// Components of a bundle, already aligned to `ids`.
#[derive(Debug, Clone)]
pub struct BundleParts {
    pub manifest: Manifest,
    pub ids: Vec<String>,
    pub responses: Table,
    pub unmasked: Table,
    pub masked: BTreeMap<String, MaskedTable>,
    /// Per-feature unmasked predictions; override `unmasked` for that
    /// feature and are required under unconditional masking.
    pub restored: BTreeMap<String, MaskedTable>,
    pub missing: BTreeMap<String, Vec<bool>>,
    pub panel: Option<Vec<PanelKey>>,
    pub raw: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct PredictionBundle {
    manifest: Manifest,
    ids: Vec<String>,
    responses: Table,
    unmasked: Table,
    masked: BTreeMap<String, MaskedTable>,
    restored: BTreeMap<String, MaskedTable>,
    missing: BTreeMap<String, Vec<bool>>,
    panel: Option<Vec<PanelKey>>,
    raw: BTreeMap<String, Vec<String>>,
}

fn check_prediction_row(loss: LossKind, row: &[f64]) -> std::result::Result<(), String> {
    if let Some(v) = row.iter().find(|v| !v.is_finite()) {
        return Err(format!("non-finite prediction {v}"));
    }
    match loss {
        LossKind::MulticlassCrossEntropy => check_probability_row(row).map_err(|e| e.to_string()),
        LossKind::BinaryCrossEntropy if !(0.0..=1.0).contains(&row[0]) => {
            Err(format!("binary prediction {} outside [0, 1]", row[0]))
        }
        _ => Ok(()),
    }
}

fn check_prediction_width(loss: LossKind, width: usize) -> std::result::Result<(), String> {
    match loss {
        LossKind::MulticlassCrossEntropy if width < 2 => {
            Err(format!("multiclass predictions need at least 2 columns, got {width}"))
        }
        LossKind::MulticlassCrossEntropy => Ok(()),
        _ if width != 1 => Err(format!("{loss:?} predictions need exactly 1 column, got {width}")),
        _ => Ok(()),
    }
}

fn check_response_width(loss: LossKind, width: usize, pred_width: usize) -> std::result::Result<(), String> {
    if loss.is_multiclass() && width != 1 && width != pred_width {
        return Err(format!(
            "multiclass responses need 1 (class index) or {pred_width} columns, got {width}"
        ));
    }
    if !loss.is_multiclass() && width != 1 {
        return Err(format!("responses need exactly 1 column, got {width}"));
    }
    Ok(())
}

impl PredictionBundle {
    /// Assembles a bundle from aligned parts, checking every invariant.
    pub fn from_parts(parts: BundleParts) -> Result<Self> {
        parts.manifest.validate()?;
        let n = parts.ids.len();
        if n == 0 {
            return Err(AicoError::EmptyTestSet("<bundle>".into()));
        }
        let mut seen = HashSet::new();
        for id in &parts.ids {
            if !seen.insert(id.as_str()) {
                return Err(AicoError::Misaligned(format!("duplicate sample id `{id}`")));
            }
        }
        let loss = parts.manifest.loss;
        if parts.responses.len() != n || parts.unmasked.len() != n {
            return Err(AicoError::Misaligned(format!(
                "{n} ids but {} responses and {} unmasked predictions",
                parts.responses.len(),
                parts.unmasked.len()
            )));
        }
        let width = parts.unmasked.width();
        check_prediction_width(loss, width).map_err(AicoError::Misaligned)?;
        check_response_width(loss, parts.responses.width(), width).map_err(AicoError::Misaligned)?;
        for i in 0..n {
            check_prediction_row(loss, parts.unmasked.row(i))
                .map_err(|m| AicoError::MalformedProbabilities(format!("unmasked `{}`: {m}", parts.ids[i])))?;
        }
        for (name, col) in &parts.missing {
            if parts.manifest.feature(name).is_none() {
                return Err(AicoError::UnknownFeature(name.clone()));
            }
            if col.len() != n {
                return Err(AicoError::Misaligned(format!("missing mask for `{name}` has wrong length")));
            }
        }
        let tables = parts.masked.iter().map(|(k, t)| ("masked", k, t));
        for (kind, name, table) in tables.chain(parts.restored.iter().map(|(k, t)| ("unmasked", k, t))) {
            if parts.manifest.feature(name).is_none() {
                return Err(AicoError::UnknownFeature(name.clone()));
            }
            if table.len() != n || table.width() != width {
                return Err(AicoError::Misaligned(format!("{kind} table for `{name}` has wrong shape")));
            }
            let missing = parts.missing.get(name);
            for i in 0..n {
                match table.row(i) {
                    Some(row) => check_prediction_row(loss, row).map_err(|m| {
                        AicoError::MalformedProbabilities(format!("{kind} `{name}` `{}`: {m}", parts.ids[i]))
                    })?,
                    None if missing.is_some_and(|m| m[i]) => {}
                    None => {
                        return Err(AicoError::Misaligned(format!(
                            "{kind} table for `{name}` lacks id `{}`",
                            parts.ids[i]
                        )))
                    }
                }
            }
        }
        if parts.manifest.masking == MaskMode::Unconditional {
            if let Some(name) = parts.masked.keys().find(|k| !parts.restored.contains_key(*k)) {
                return Err(AicoError::Config(format!(
                    "unconditional masking needs a per-feature unmasked table for `{name}`"
                )));
            }
        }
        if let Some(panel) = &parts.panel {
            if panel.len() != n {
                return Err(AicoError::Misaligned("panel keys have wrong length".into()));
            }
            let mut keys = HashSet::new();
            for k in panel {
                if !keys.insert((k.unit.as_str(), k.time)) {
                    return Err(AicoError::Misaligned(format!(
                        "duplicate panel key (unit `{}`, time {})",
                        k.unit, k.time
                    )));
                }
            }
        } else if parts.manifest.panel {
            return Err(AicoError::Config("manifest declares a panel but no panel keys given".into()));
        }
        for (name, col) in &parts.raw {
            if col.len() != n {
                return Err(AicoError::Misaligned(format!("raw column `{name}` has wrong length")));
            }
        }
        Ok(Self {
            manifest: parts.manifest,
            ids: parts.ids,
            responses: parts.responses,
            unmasked: parts.unmasked,
            masked: parts.masked,
            restored: parts.restored,
            missing: parts.missing,
            panel: parts.panel,
            raw: parts.raw,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn responses(&self) -> &Table {
        &self.responses
    }

    pub fn unmasked(&self) -> &Table {
        &self.unmasked
    }

    pub fn masked(&self, feature: &str) -> Result<&MaskedTable> {
        self.masked
            .get(feature)
            .ok_or_else(|| AicoError::UnknownFeature(feature.to_owned()))
    }

    /// Unmasked prediction for `feature` at `row`: the feature's own
    /// unmasked table if it has one, else the shared table.
    pub fn unmasked_row(&self, feature: &str, row: usize) -> Option<&[f64]> {
        match self.restored.get(feature) {
            Some(t) => t.row(row),
            None => Some(self.unmasked.row(row)),
        }
    }

    /// Features with a usable masked table.
    pub fn masked_features(&self) -> impl Iterator<Item = &str> {
        self.masked.keys().map(String::as_str)
    }

    pub fn missing_mask(&self, feature: &str) -> Option<&[bool]> {
        self.missing.get(feature).map(Vec::as_slice)
    }

    pub fn panel_keys(&self) -> Option<&[PanelKey]> {
        self.panel.as_deref()
    }

    pub fn raw_column(&self, name: &str) -> Option<&[String]> {
        self.raw.get(name).map(Vec::as_slice)
    }

    pub fn view(&self) -> BundleView<'_> {
        BundleView {
            bundle: self,
            rows: (0..self.len()).collect(),
        }
    }

    /// Writes the bundle directory, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(MASKED_DIR)).map_err(|e| AicoError::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| AicoError::Config(format!("manifest serialization: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest + "\n").map_err(|e| AicoError::io(&path, e))?;

        let all = vec![true; self.len()];
        write_numeric(&dir.join(RESPONSES_FILE), "y", &self.ids, &self.responses, &all)?;
        write_numeric(&dir.join(UNMASKED_FILE), "p", &self.ids, &self.unmasked, &all)?;
        for f in &self.manifest.features {
            if let Some(t) = self.masked.get(&f.spec.name) {
                let path = dir.join(f.masked_path());
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| AicoError::io(parent, e))?;
                }
                write_numeric(&path, "p", &self.ids, &t.table, &t.present)?;
            }
            if let Some(t) = self.restored.get(&f.spec.name) {
                let path = dir.join(f.restored_path());
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| AicoError::io(parent, e))?;
                }
                write_numeric(&path, "p", &self.ids, &t.table, &t.present)?;
            }
        }
        if !self.missing.is_empty() {
            let cols: Vec<(&String, Vec<String>)> = self
                .missing
                .iter()
                .map(|(k, v)| (k, v.iter().map(|&m| if m { "1" } else { "0" }.to_owned()).collect()))
                .collect();
            write_text(&dir.join(MISSING_FILE), &self.ids, &cols)?;
        }
        if let Some(panel) = &self.panel {
            let unit = String::from("unit");
            let time = String::from("time");
            let cols = vec![
                (&unit, panel.iter().map(|k| k.unit.clone()).collect()),
                (&time, panel.iter().map(|k| k.time.to_string()).collect()),
            ];
            write_text(&dir.join(PANEL_FILE), &self.ids, &cols)?;
        }
        if !self.raw.is_empty() {
            let cols: Vec<(&String, Vec<String>)> = self.raw.iter().map(|(k, v)| (k, v.clone())).collect();
            write_text(&dir.join(RAW_FEATURES_FILE), &self.ids, &cols)?;
        }
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> AicoError {
    let line = e.position().map(|p| p.line());
    AicoError::bundle(path, line, e.to_string())
}

fn write_numeric(path: &Path, prefix: &str, ids: &[String], t: &Table, present: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_owned()];
    header.extend((0..t.width()).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in ids.iter().enumerate() {
        if !present[i] {
            continue;
        }
        let mut rec = vec![id.clone()];
        rec.extend(t.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AicoError::io(path, e))
}

fn write_text(path: &Path, ids: &[String], cols: &[(&String, Vec<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_owned()];
    header.extend(cols.iter().map(|(k, _)| (*k).clone()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(cols.iter().map(|(_, v)| v[i].clone()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AicoError::io(path, e))
}

struct RawTable {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(String, Vec<String>, u64)>,
}

fn read_raw(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => AicoError::bundle(path, None, "cannot open table"),
            _ => csv_err(path, e),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.len() < 2 {
        return Err(AicoError::bundle(path, Some(1), "need an id column and at least one value column"));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec.get(0).unwrap_or_default().to_owned();
        if !seen.insert(id.clone()) {
            return Err(AicoError::bundle(path, Some(line), format!("duplicate id `{id}`")));
        }
        rows.push((id, rec.iter().skip(1).map(str::to_owned).collect(), line));
    }
    Ok(RawTable {
        path: path.to_owned(),
        header,
        rows,
    })
}

impl RawTable {
    fn numeric_row(&self, idx: usize) -> Result<Vec<f64>> {
        let (_, fields, line) = &self.rows[idx];
        fields
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    AicoError::bundle(&self.path, Some(*line), format!("not a finite number: `{f}`"))
                })
            })
            .collect()
    }

    fn width(&self) -> usize {
        self.header.len() - 1
    }

    fn err_at(&self, idx: usize, msg: impl Into<String>) -> AicoError {
        AicoError::bundle(&self.path, Some(self.rows[idx].2), msg)
    }
}

/// A bundle loaded leniently: features whose masked table failed
/// validation are dropped and their errors kept.
#[derive(Debug)]
pub struct LoadedBundle {
    pub bundle: PredictionBundle,
    pub feature_errors: BTreeMap<String, AicoError>,
}

/// Strict parse: any malformed table is an error.
pub fn parse_bundle(dir: &Path) -> Result<PredictionBundle> {
    let loaded = load(dir, true)?;
    Ok(loaded.bundle)
}

/// Lenient parse: masked-table errors are isolated per feature.
pub fn parse_bundle_lenient(dir: &Path) -> Result<LoadedBundle> {
    load(dir, false)
}

fn load(dir: &Path, strict: bool) -> Result<LoadedBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| AicoError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        AicoError::bundle(&manifest_path, Some(e.line() as u64), format!("malformed manifest: {e}"))
    })?;
    manifest
        .validate()
        .map_err(|e| AicoError::bundle(&manifest_path, None, e.to_string()))?;
    let loss = manifest.loss;

    let responses_raw = read_raw(&dir.join(RESPONSES_FILE))?;
    let ids: Vec<String> = responses_raw.rows.iter().map(|r| r.0.clone()).collect();
    if ids.is_empty() {
        return Err(AicoError::bundle(&responses_raw.path, None, "no samples"));
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let n = ids.len();

    let mut responses = Table::new(responses_raw.width());
    for i in 0..n {
        responses.push(&responses_raw.numeric_row(i)?)?;
    }

    let unmasked_raw = read_raw(&dir.join(UNMASKED_FILE))?;
    let width = unmasked_raw.width();
    check_prediction_width(loss, width).map_err(|m| AicoError::bundle(&unmasked_raw.path, Some(1), m))?;
    check_response_width(loss, responses.width(), width)
        .map_err(|m| AicoError::bundle(&responses_raw.path, Some(1), m))?;
    let unmasked_rows = align(&unmasked_raw, &index, loss)?;
    if let Some(i) = unmasked_rows.iter().position(Option::is_none) {
        return Err(AicoError::bundle(
            &unmasked_raw.path,
            None,
            format!("id `{}` from {RESPONSES_FILE} is missing", ids[i]),
        ));
    }
    let unmasked = Table::from_rows(width, unmasked_rows.into_iter().flatten())?;

    let mut missing: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let missing_path = dir.join(MISSING_FILE);
    if missing_path.exists() {
        let raw = read_raw(&missing_path)?;
        for (j, name) in raw.header.iter().enumerate().skip(1) {
            if manifest.feature(name).is_none() {
                return Err(AicoError::bundle(&missing_path, Some(1), format!("unknown feature column `{name}`")));
            }
            let mut col = vec![false; n];
            for (r, (id, fields, line)) in raw.rows.iter().enumerate() {
                let &i = index.get(id.as_str()).ok_or_else(|| raw.err_at(r, format!("unknown id `{id}`")))?;
                col[i] = match fields[j - 1].trim() {
                    "1" | "true" | "TRUE" | "True" => true,
                    "0" | "false" | "FALSE" | "False" | "" => false,
                    other => {
                        return Err(AicoError::bundle(&missing_path, Some(*line), format!("bad flag `{other}`")))
                    }
                };
            }
            missing.insert(name.clone(), col);
        }
    }

    let mut masked = BTreeMap::new();
    let mut restored = BTreeMap::new();
    let mut feature_errors = BTreeMap::new();
    let unconditional = manifest.masking == MaskMode::Unconditional;
    for f in &manifest.features {
        let name = &f.spec.name;
        let load_pair = || -> Result<(MaskedTable, Option<MaskedTable>)> {
            let m = load_feature_table(&dir.join(f.masked_path()), f, &index, &ids, width, loss, missing.get(name))?;
            let restored_path = dir.join(f.restored_path());
            let r = if unconditional || restored_path.exists() {
                Some(load_feature_table(&restored_path, f, &index, &ids, width, loss, missing.get(name))?)
            } else {
                None
            };
            Ok((m, r))
        };
        match load_pair() {
            Ok((m, r)) => {
                masked.insert(name.clone(), m);
                if let Some(r) = r {
                    restored.insert(name.clone(), r);
                }
            }
            Err(e) if strict => return Err(e),
            Err(e) => {
                feature_errors.insert(name.clone(), e);
            }
        }
    }

    let panel_path = dir.join(PANEL_FILE);
    let panel = if panel_path.exists() {
        let raw = read_raw(&panel_path)?;
        if raw.header.len() != 3 {
            return Err(AicoError::bundle(&panel_path, Some(1), "expected columns id,unit,time"));
        }
        let mut keys: Vec<Option<PanelKey>> = vec![None; n];
        for (r, (id, fields, line)) in raw.rows.iter().enumerate() {
            let &i = index.get(id.as_str()).ok_or_else(|| raw.err_at(r, format!("unknown id `{id}`")))?;
            let time = fields[1]
                .trim()
                .parse::<i64>()
                .map_err(|_| AicoError::bundle(&panel_path, Some(*line), format!("bad time `{}`", fields[1])))?;
            keys[i] = Some(PanelKey::new(fields[0].clone(), time));
        }
        if let Some(i) = keys.iter().position(Option::is_none) {
            return Err(AicoError::bundle(&panel_path, None, format!("id `{}` has no panel key", ids[i])));
        }
        Some(keys.into_iter().flatten().collect())
    } else {
        None
    };

    let raw_path = dir.join(RAW_FEATURES_FILE);
    let mut raw_cols = BTreeMap::new();
    if raw_path.exists() {
        let raw = read_raw(&raw_path)?;
        let mut cols: Vec<Vec<Option<String>>> = vec![vec![None; n]; raw.width()];
        for (r, (id, fields, _)) in raw.rows.iter().enumerate() {
            let &i = index.get(id.as_str()).ok_or_else(|| raw.err_at(r, format!("unknown id `{id}`")))?;
            for (c, v) in fields.iter().enumerate() {
                cols[c][i] = Some(v.clone());
            }
        }
        for (c, name) in raw.header.iter().skip(1).enumerate() {
            if let Some(i) = cols[c].iter().position(Option::is_none) {
                return Err(AicoError::bundle(&raw_path, None, format!("id `{}` missing", ids[i])));
            }
            raw_cols.insert(name.clone(), cols[c].drain(..).flatten().collect());
        }
    }

    let bundle = PredictionBundle::from_parts(BundleParts {
        manifest,
        ids,
        responses,
        unmasked,
        masked,
        restored,
        missing,
        panel,
        raw: raw_cols,
    })
    .map_err(|e| AicoError::bundle(dir, None, e.to_string()))?;
    Ok(LoadedBundle { bundle, feature_errors })
}

/// Aligns a prediction table to the canonical ids, validating each row.
fn align(raw: &RawTable, index: &HashMap<&str, usize>, loss: LossKind) -> Result<Vec<Option<Vec<f64>>>> {
    let mut out = vec![None; index.len()];
    for (r, (id, _, _)) in raw.rows.iter().enumerate() {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| raw.err_at(r, format!("id `{id}` not present in {RESPONSES_FILE}")))?;
        let row = raw.numeric_row(r)?;
        check_prediction_row(loss, &row).map_err(|m| raw.err_at(r, m))?;
        out[i] = Some(row);
    }
    Ok(out)
}

fn load_feature_table(
    path: &Path,
    feature: &ManifestFeature,
    index: &HashMap<&str, usize>,
    ids: &[String],
    width: usize,
    loss: LossKind,
    missing: Option<&Vec<bool>>,
) -> Result<MaskedTable> {
    let raw = read_raw(path)?;
    if raw.width() != width {
        return Err(AicoError::bundle(
            &raw.path,
            Some(1),
            format!("{} prediction columns, unmasked has {width}", raw.width()),
        ));
    }
    let rows = align(&raw, index, loss)?;
    for (i, r) in rows.iter().enumerate() {
        if r.is_none() && !missing.is_some_and(|m| m[i]) {
            return Err(AicoError::bundle(
                &raw.path,
                None,
                format!("id `{}` is missing but not declared missing for `{}`", ids[i], feature.spec.name),
            ));
        }
    }
    MaskedTable::from_options(width, &rows)
}

/// A subset of a bundle's samples; every downstream operation acts on the
/// view's rows only.
#[derive(Debug, Clone)]
pub struct BundleView<'a> {
    bundle: &'a PredictionBundle,
    rows: Vec<usize>,
}

impl<'a> BundleView<'a> {
    pub(crate) fn new(bundle: &'a PredictionBundle, rows: Vec<usize>) -> Self {
        Self { bundle, rows }
    }

    pub fn bundle(&self) -> &'a PredictionBundle {
        self.bundle
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PredictionBundle {
        let manifest = Manifest::new(vec![FeatureSpec::continuous("x")], LossKind::Squared, MaskMode::Conditional);
        PredictionBundle::from_parts(BundleParts {
            manifest,
            ids: vec!["a".into(), "b".into(), "c".into()],
            responses: Table::from_rows(1, [[1.0], [2.0], [3.0]]).unwrap(),
            unmasked: Table::from_rows(1, [[1.0], [2.0], [3.5]]).unwrap(),
            masked: BTreeMap::from([(
                "x".to_owned(),
                MaskedTable::full(Table::from_rows(1, [[0.0], [2.0], [3.0]]).unwrap()),
            )]),
            restored: BTreeMap::new(),
            missing: BTreeMap::new(),
            panel: None,
            raw: BTreeMap::new(),
        })
        .unwrap()
    }

    #[test]
    fn write_then_parse_preserves_everything() {
        let b = tiny();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let back = parse_bundle(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.ids(), b.ids());
        assert_eq!(back.masked("x").unwrap(), b.masked("x").unwrap());
        assert_eq!(back.manifest(), b.manifest());
    }

    #[test]
    fn unconditional_bundles_carry_per_feature_unmasked_tables() {
        let manifest = Manifest::new(vec![FeatureSpec::continuous("x")], LossKind::Squared, MaskMode::Unconditional);
        let table = |v: [f64; 2]| MaskedTable::full(Table::from_rows(1, v.map(|x| [x])).unwrap());
        let mut parts = BundleParts {
            manifest,
            ids: vec!["a".into(), "b".into()],
            responses: Table::from_rows(1, [[1.0], [2.0]]).unwrap(),
            unmasked: Table::from_rows(1, [[1.0], [2.0]]).unwrap(),
            masked: BTreeMap::from([("x".to_owned(), table([0.0, 0.0]))]),
            restored: BTreeMap::new(),
            missing: BTreeMap::new(),
            panel: None,
            raw: BTreeMap::new(),
        };
        assert!(PredictionBundle::from_parts(parts.clone()).is_err());
        parts.restored.insert("x".into(), table([0.5, 1.5]));
        let b = PredictionBundle::from_parts(parts).unwrap();
        assert_eq!(b.unmasked_row("x", 1), Some(&[1.5][..]));

        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        assert!(dir.path().join("unmasked/x.csv").exists());
        let back = parse_bundle(dir.path()).unwrap();
        assert_eq!(back.unmasked_row("x", 0), Some(&[0.5][..]));
        std::fs::remove_file(dir.path().join("unmasked/x.csv")).unwrap();
        assert!(parse_bundle(dir.path()).is_err());
        let lenient = parse_bundle_lenient(dir.path()).unwrap();
        assert!(lenient.feature_errors.contains_key("x"));
    }

    #[test]
    fn missing_masked_row_must_be_declared() {
        let manifest = Manifest::new(vec![FeatureSpec::continuous("x")], LossKind::Squared, MaskMode::Conditional);
        let parts = |missing: BTreeMap<String, Vec<bool>>| BundleParts {
            manifest: manifest.clone(),
            ids: vec!["a".into(), "b".into()],
            responses: Table::from_rows(1, [[1.0], [2.0]]).unwrap(),
            unmasked: Table::from_rows(1, [[1.0], [2.0]]).unwrap(),
            masked: BTreeMap::from([(
                "x".to_owned(),
                MaskedTable::from_options(1, &[Some(vec![1.0]), None]).unwrap(),
            )]),
            restored: BTreeMap::new(),
            missing,
            panel: None,
            raw: BTreeMap::new(),
        };
        let err = PredictionBundle::from_parts(parts(BTreeMap::new())).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        PredictionBundle::from_parts(parts(BTreeMap::from([("x".to_owned(), vec![false, true])]))).unwrap();
    }

    #[test]
    fn manifest_rejects_unknown_schema_and_duplicates() {
        let mut m = Manifest::new(
            vec![FeatureSpec::continuous("x"), FeatureSpec::continuous("x")],
            LossKind::Squared,
            MaskMode::Conditional,
        );
        assert!(m.validate().is_err());
        m.features.pop();
        m.validate().unwrap();
        m.schema = "other/9".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_json_shape() {
        let mut m = Manifest::new(
            vec![FeatureSpec::discrete("d", vec![0.0.into(), 1.0.into()])],
            LossKind::Pinball { tau: 0.9 },
            MaskMode::Unconditional,
        );
        m.features[0].reference = Some(FeatureValue::Number(1.0));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"schema\":\"aico-bundle/1\""));
        assert!(json.contains("\"pinball\":{\"tau\":0.9}"));
        let back: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn file_stems_are_sanitized() {
        assert_eq!(file_stem("PAY_0"), "PAY_0");
        assert_eq!(file_stem("a b/c"), "a_b_c");
    }
}
