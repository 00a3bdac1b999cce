//! Known-truth regression and classification designs with an oracle model.
//!
//! Nineteen features: `X1..X12` enter the conditional mean `mu`,
//! `X13..X19` do not. The oracle predicts with the true `mu` (regression)
//! or `g(mu)` (classification), so the significance pattern is known
//! without any model fitting.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, LogNormal, Poisson, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleParts, Manifest, MaskedTable, PredictionBundle, Table};
use crate::effects::{apply_mask, reference_value, FeatureKind, FeatureSpec, FeatureValue, LossKind, MaskMode};
use crate::error::{AicoError, Result};
use crate::pipeline::{run_test, RunConfig};
use crate::report::FeatureReport;
use crate::rng::{counter_stream, stable_hash};
use crate::sign_test::TestConfig;

pub const DIM: usize = 19;
/// Features `1..=ACTIVE` influence the response.
pub const ACTIVE: usize = 12;

/// Features drawn from the joint Gaussian block, 1-based.
const GAUSSIAN: [usize; 11] = [1, 2, 3, 4, 5, 6, 7, 13, 14, 15, 16];
const DEFAULT_CORRELATIONS: [(usize, usize, f64); 2] = [(1, 6, 0.85), (15, 16, 0.85)];
const T_DF: f64 = 5.0;
const POISSON_MEAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl FromStr for Task {
    type Err = AicoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(AicoError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Replacement marginal law for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Marginal {
    /// Applied to the feature's Gaussian draw, so correlations survive;
    /// outside the Gaussian block it scales a fresh standard normal.
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Exponential { rate: f64 },
    Beta { a: f64, b: f64 },
    Uniform { low: f64, high: f64 },
    Poisson { mean: f64 },
    StudentT { df: f64 },
}

impl Marginal {
    fn sample<R: Rng>(&self, z: f64, rng: &mut R) -> f64 {
        // parameters are checked in SyntheticSpec::validate
        match *self {
            Marginal::Normal { mean, sd } => mean + sd * z,
            Marginal::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
            Marginal::Exponential { rate } => Exp::new(rate).expect("validated").sample(rng),
            Marginal::Beta { a, b } => Beta::new(a, b).expect("validated").sample(rng),
            Marginal::Uniform { low, high } => Uniform::new(low, high).expect("validated").sample(rng),
            Marginal::Poisson { mean } => Poisson::new(mean).expect("validated").sample(rng),
            Marginal::StudentT { df } => StudentT::new(df).expect("validated").sample(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Marginal::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Marginal::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).is_ok(),
            Marginal::Exponential { rate } => Exp::new(rate).is_ok(),
            Marginal::Beta { a, b } => Beta::new(a, b).is_ok(),
            Marginal::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Marginal::Poisson { mean } => Poisson::new(mean).is_ok(),
            Marginal::StudentT { df } => df.is_finite() && df > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(AicoError::Config(format!("invalid marginal {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub task: Task,
    /// `(i, j, rho)` for Gaussian features `i`, `j` (1-based), replacing
    /// the default for that pair. Defaults: `(1, 6)` and `(15, 16)` at 0.85.
    #[serde(default)]
    pub correlations: Vec<(usize, usize, f64)>,
    /// Marginal replacements keyed by 1-based feature index. Non-normal
    /// replacements are drawn independently of the Gaussian block.
    #[serde(default)]
    pub distributions: BTreeMap<usize, Marginal>,
}

impl SyntheticSpec {
    pub fn new(task: Task, n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            task,
            correlations: Vec::new(),
            distributions: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &(i, j, rho) in &self.correlations {
            if !GAUSSIAN.contains(&i) || !GAUSSIAN.contains(&j) || i == j {
                return Err(AicoError::Config(format!(
                    "correlation ({i}, {j}) must join two distinct Gaussian features {GAUSSIAN:?}"
                )));
            }
            if !(0.0..=1.0).contains(&rho) {
                return Err(AicoError::Config(format!("correlation {rho} outside [0, 1]")));
            }
        }
        for (&k, m) in &self.distributions {
            if !(1..=DIM).contains(&k) {
                return Err(AicoError::Config(format!("feature index {k} outside 1..={DIM}")));
            }
            m.validate()?;
        }
        Ok(())
    }

    fn correlation_matrix(&self) -> Vec<Vec<f64>> {
        let d = GAUSSIAN.len();
        let pos = |k: usize| GAUSSIAN.iter().position(|&g| g == k).expect("validated");
        let mut c = vec![vec![0.0; d]; d];
        for (i, row) in c.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for &(i, j, rho) in DEFAULT_CORRELATIONS.iter().chain(&self.correlations) {
            let (a, b) = (pos(i), pos(j));
            c[a][b] = rho;
            c[b][a] = rho;
        }
        c
    }
}

/// Lower-triangular `L` with `L L^T = c` for a positive semidefinite `c`.
/// Zero pivots (perfect correlation) yield zero columns.
pub fn cholesky_psd(c: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    const TOL: f64 = 1e-10;
    let d = c.len();
    let mut l = vec![vec![0.0; d]; d];
    for j in 0..d {
        let diag = c[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if diag < -TOL {
            return Err(AicoError::Config("correlation matrix is not positive semidefinite".into()));
        }
        let pivot = diag.max(0.0).sqrt();
        l[j][j] = pivot;
        for i in j + 1..d {
            let off = c[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if pivot > TOL {
                l[i][j] = off / pivot;
            } else if off.abs() > TOL {
                return Err(AicoError::Config("correlation matrix is not positive semidefinite".into()));
            }
        }
    }
    Ok(l)
}

/// `3 + 4x1 + x1 x2 + 3x3^2 + 2x4 x5 + 6x6 + 2 sin x7 + exp x8 + 5x9 + 3x10 +
/// 4x11 + 5x12`, with `x[0]` holding `x1`.
pub fn mu(x: &[f64]) -> f64 {
    3.0 + 4.0 * x[0]
        + x[0] * x[1]
        + 3.0 * x[2] * x[2]
        + 2.0 * x[3] * x[4]
        + 6.0 * x[5]
        + 2.0 * x[6].sin()
        + x[7].exp()
        + 5.0 * x[8]
        + 3.0 * x[9]
        + 4.0 * x[10]
        + 5.0 * x[11]
}

/// Link for the classification design, `1 / (1 + e^w)`.
pub fn link(w: f64) -> f64 {
    1.0 / (1.0 + w.exp())
}

/// Oracle prediction: `mu` for regression, `link(mu)` for classification.
pub fn oracle(task: Task, x: &[f64]) -> f64 {
    match task {
        Task::Regression => mu(x),
        Task::Classification => link(mu(x)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub x: Vec<[f64; DIM]>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Values of feature `k` (1-based).
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.x.iter().map(|row| row[k - 1]).collect()
    }
}

/// Draws `spec.n_samples` samples. Sample `i` uses its own random stream,
/// so output is identical for any thread count.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let chol = cholesky_psd(&spec.correlation_matrix())?;
    let t = StudentT::new(T_DF).expect("valid df");
    let poisson = Poisson::new(POISSON_MEAN).expect("valid mean");
    let unit = Uniform::new(-1.0, 1.0).expect("valid bounds");

    let samples: Vec<([f64; DIM], f64)> = (0..spec.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = counter_stream(spec.seed, "synthetic", i);
            let e: Vec<f64> = (0..GAUSSIAN.len()).map(|_| rng.sample(StandardNormal)).collect();
            let mut x = [0.0; DIM];
            let mut z = [0.0; DIM];
            for (a, &k) in GAUSSIAN.iter().enumerate() {
                z[k - 1] = (0..=a).map(|b| chol[a][b] * e[b]).sum();
                x[k - 1] = z[k - 1];
            }
            let w: f64 = rng.sample(StandardNormal);
            x[7] = unit.sample(&mut rng);
            x[8] = if x[1] + w < 0.0 { 1.0 } else { 0.0 };
            x[9] = poisson.sample(&mut rng);
            for k in [11, 12, 17, 18, 19] {
                x[k - 1] = t.sample(&mut rng);
            }
            for (&k, m) in &spec.distributions {
                // features outside the Gaussian block get a fresh standard draw
                let zk = if GAUSSIAN.contains(&k) { z[k - 1] } else { rng.sample(StandardNormal) };
                x[k - 1] = m.sample(zk, &mut rng);
            }
            let m = mu(&x);
            let y = match spec.task {
                Task::Regression => m + rng.sample::<f64, _>(StandardNormal),
                Task::Classification => {
                    if rng.random::<f64>() < link(m) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            (x, y)
        })
        .collect();
    let (x, y) = samples.into_iter().unzip();
    Ok(Dataset { task: spec.task, x, y })
}

pub fn feature_name(k: usize) -> String {
    format!("X{k}")
}

/// Feature kinds: `X9` a dummy, `X10` a count with the training values as
/// support, the rest continuous.
pub fn feature_specs(train: &Dataset) -> Vec<FeatureSpec> {
    (1..=DIM)
        .map(|k| match k {
            9 => FeatureSpec::discrete(feature_name(k), vec![0.0.into(), 1.0.into()]),
            10 => {
                let mut support = train.column(10);
                support.sort_by(f64::total_cmp);
                support.dedup();
                FeatureSpec::discrete(feature_name(k), support.into_iter().map(FeatureValue::from).collect())
            }
            _ => FeatureSpec::continuous(feature_name(k)),
        })
        .collect()
}

/// Per-feature reference lookup built from the training partition.
struct References {
    means: Vec<Option<f64>>,
    /// Adjusted mode keyed by the masked value's bits.
    modes: Vec<HashMap<u64, f64>>,
    specs: Vec<FeatureSpec>,
    training: Vec<Vec<FeatureValue>>,
}

impl References {
    fn new(specs: Vec<FeatureSpec>, train: &Dataset) -> Result<Self> {
        let training: Vec<Vec<FeatureValue>> = (1..=DIM)
            .map(|k| train.column(k).into_iter().map(FeatureValue::from).collect())
            .collect();
        let mut means = vec![None; DIM];
        for (j, spec) in specs.iter().enumerate() {
            if spec.kind == FeatureKind::Continuous {
                means[j] = reference_value(spec, &training[j], None)?.as_number();
            }
        }
        Ok(Self {
            means,
            modes: vec![HashMap::new(); DIM],
            specs,
            training,
        })
    }

    /// Resolves every per-sample reference ahead of the parallel pass.
    fn prime(&mut self, test: &Dataset) -> Result<()> {
        for j in 0..DIM {
            if self.specs[j].kind == FeatureKind::Continuous {
                continue;
            }
            for row in &test.x {
                let v = row[j];
                if !self.modes[j].contains_key(&v.to_bits()) {
                    let r = reference_value(&self.specs[j], &self.training[j], Some(&v.into()))?;
                    let r = r.as_number().ok_or_else(|| AicoError::Domain("non-numeric reference".into()))?;
                    self.modes[j].insert(v.to_bits(), r);
                }
            }
        }
        Ok(())
    }

    fn for_sample(&self, x: &[f64]) -> Vec<Option<f64>> {
        (0..DIM)
            .map(|j| self.means[j].or_else(|| self.modes[j].get(&x[j].to_bits()).copied()))
            .collect()
    }
}

/// Bundle of oracle predictions on `test`, with references from `train`.
pub fn oracle_bundle(train: &Dataset, test: &Dataset, mode: MaskMode) -> Result<PredictionBundle> {
    if train.task != test.task {
        return Err(AicoError::Config("training and test tasks differ".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(AicoError::EmptyTestSet("<synthetic>".into()));
    }
    let task = test.task;
    let specs = feature_specs(train);
    let mut refs = References::new(specs.clone(), train)?;
    refs.prime(test)?;

    // per sample: unmasked, then (masked, restored) per feature
    type Row = (f64, Vec<(f64, f64)>);
    let rows: Vec<Row> = test
        .x
        .par_iter()
        .map(|x| -> Result<Row> {
            let r = refs.for_sample(x);
            let per_feature = (0..DIM)
                .map(|j| {
                    let (masked, unmasked) = apply_mask(x, mode, j, &r)?;
                    Ok((oracle(task, &masked), oracle(task, &unmasked)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((oracle(task, x), per_feature))
        })
        .collect::<Result<Vec<_>>>()?;

    let loss = match task {
        Task::Regression => LossKind::Squared,
        Task::Classification => LossKind::BinaryCrossEntropy,
    };
    let mut manifest = Manifest::new(specs, loss, mode);
    for (j, f) in manifest.features.iter_mut().enumerate() {
        f.reference = refs.means[j].map(FeatureValue::Number);
    }
    let column = |f: &dyn Fn(&Row) -> f64| Table::from_rows(1, rows.iter().map(|r| [f(r)]));
    let mut masked = BTreeMap::new();
    let mut restored = BTreeMap::new();
    for j in 0..DIM {
        masked.insert(feature_name(j + 1), MaskedTable::full(column(&|r| r.1[j].0)?));
        if mode == MaskMode::Unconditional {
            restored.insert(feature_name(j + 1), MaskedTable::full(column(&|r| r.1[j].1)?));
        }
    }
    PredictionBundle::from_parts(BundleParts {
        manifest,
        ids: (0..test.len()).map(|i| format!("t{i}")).collect(),
        responses: Table::from_rows(1, test.y.iter().map(|&y| [y]))?,
        unmasked: column(&|r| r.0)?,
        masked,
        restored,
        missing: BTreeMap::new(),
        panel: None,
        raw: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task: Task,
    pub n_test: usize,
    /// Size of the reference partition; defaults to `n_test`.
    pub n_train: Option<usize>,
    pub trials: usize,
    pub alpha: f64,
    pub seed: u64,
    pub masking: MaskMode,
    #[serde(default)]
    pub correlations: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub distributions: BTreeMap<usize, Marginal>,
}

impl BenchConfig {
    pub fn new(task: Task, n_test: usize, trials: usize, alpha: f64, seed: u64) -> Self {
        Self {
            task,
            n_test,
            n_train: None,
            trials,
            alpha,
            seed,
            masking: MaskMode::Conditional,
            correlations: Vec::new(),
            distributions: BTreeMap::new(),
        }
    }

    fn trial_seed(&self, trial: usize, part: &str) -> u64 {
        stable_hash(&[&self.seed.to_le_bytes(), &(trial as u64).to_le_bytes(), part.as_bytes()])
    }

    fn spec(&self, n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: n,
            seed,
            task: self.task,
            correlations: self.correlations.clone(),
            distributions: self.distributions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub reports: Vec<FeatureReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub task: Task,
    pub n_test: usize,
    pub trials: usize,
    pub alpha: f64,
    /// Rejection count per feature, in feature order.
    pub rejections: Vec<(String, usize)>,
}

impl BenchSummary {
    pub fn count(&self, feature: &str) -> usize {
        self.rejections
            .iter()
            .find(|(f, _)| f == feature)
            .map(|(_, c)| *c)
            .unwrap_or(0)
    }

    /// Rejections summed over the null features.
    pub fn false_rejections(&self) -> usize {
        (ACTIVE + 1..=DIM).map(|k| self.count(&feature_name(k))).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:?} task, N = {}, alpha = {}, {} trials\n{:<8}{}\n",
            self.task, self.n_test, self.alpha, self.trials, "Feature", "Rejections"
        );
        for (f, c) in &self.rejections {
            out.push_str(&format!("{f:<8}{c}/{}\n", self.trials));
        }
        out
    }
}

/// One seeded trial: fresh training and test draws, oracle bundle, tests.
pub fn run_trial(config: &BenchConfig, trial: usize) -> Result<TrialOutcome> {
    let train = generate(&config.spec(config.n_train.unwrap_or(config.n_test), config.trial_seed(trial, "train")))?;
    let test = generate(&config.spec(config.n_test, config.trial_seed(trial, "test")))?;
    let bundle = oracle_bundle(&train, &test, config.masking)?;
    let seed = config.trial_seed(trial, "decide");
    let run = RunConfig {
        test: TestConfig {
            alpha: config.alpha,
            seed,
            ..TestConfig::default()
        },
        ..RunConfig::default()
    };
    let features: Vec<String> = (1..=DIM).map(feature_name).collect();
    Ok(TrialOutcome {
        trial,
        seed,
        reports: run_test(&bundle.view(), &features, &run)?,
    })
}

pub fn summarize(config: &BenchConfig, outcomes: &[TrialOutcome]) -> BenchSummary {
    let rejections = (1..=DIM)
        .map(feature_name)
        .map(|f| {
            let c = outcomes
                .iter()
                .filter(|o| o.reports.iter().any(|r| r.feature == f && r.rejected()))
                .count();
            (f, c)
        })
        .collect();
    BenchSummary {
        task: config.task,
        n_test: config.n_test,
        trials: outcomes.len(),
        alpha: config.alpha,
        rejections,
    }
}

pub fn run_bench(config: &BenchConfig) -> Result<(Vec<TrialOutcome>, BenchSummary)> {
    let outcomes = (0..config.trials)
        .map(|t| run_trial(config, t))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(config, &outcomes);
    Ok((outcomes, summary))
}
