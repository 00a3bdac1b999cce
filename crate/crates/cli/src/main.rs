//! `aico`: exact feature-significance tests on prediction bundles.
//!
//! ```bash
//! aico test ./bundle --alpha 0.01 --format text
//! aico test ./bundle --adjust bonferroni --format json --out report.json
//! aico power --n 500 --alpha 0.05 --s 0.6
//! aico samplesize --s 0.55 --alpha 0.05 --power 0.9
//! aico crossfit --scheme minp fold1 fold2 fold3 fold4 fold5
//! aico bench regression --n-test 10000 --trials 10 --alpha 0.01 --out bench/
//! ```
//!
//! The default seed comes from `AICO_SEED` when `--seed` is absent.
//! Warnings go to standard error; any fatal error exits with status 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use aico::bundle::{parse_bundle, parse_bundle_lenient};
use aico::effects::{LossKind, MaskMode};
use aico::panel::{condition_subset, Predicate, TrajectoryAggregator};
use aico::pipeline::{run_crossfit, run_loaded, Adjust, CrossfitScheme, RunConfig};
use aico::power::{power, required_sample_size_capped, SAMPLE_SIZE_CAP};
use aico::report::{emit_report, ReportFormat};
use aico::rng::SEED_ENV;
use aico::sign_test::{TestConfig, TieMode};
use aico::synthetic::{run_trial, summarize, BenchConfig, Task};
use aico::AicoError;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

fn parse<T: FromStr<Err = AicoError>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: AicoError| e.to_string())
}

fn parse_masking(s: &str) -> std::result::Result<MaskMode, String> {
    match s {
        "conditional" => Ok(MaskMode::Conditional),
        "unconditional" => Ok(MaskMode::Unconditional),
        other => Err(format!("unknown masking mode `{other}`")),
    }
}

fn parse_aggregator(s: &str) -> std::result::Result<TrajectoryAggregator, String> {
    match s {
        "mean" => Ok(TrajectoryAggregator::Mean),
        "max" => Ok(TrajectoryAggregator::Max),
        other => Err(format!("unknown trajectory aggregator `{other}`")),
    }
}

/// Exact randomized sign tests for model-agnostic feature significance
#[derive(Parser, Debug)]
#[command(name = "aico", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test every (or selected) feature of a prediction bundle
    Test(TestArgs),
    /// Check a bundle against every format invariant
    Validate {
        bundle: PathBuf,
    },
    /// Exact power of the test at success probability s
    Power {
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        s: f64,
    },
    /// Smallest test-set size reaching a target power
    Samplesize {
        #[arg(long)]
        s: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        power: f64,
        /// Largest size to consider
        #[arg(long, default_value_t = SAMPLE_SIZE_CAP)]
        cap: u64,
    },
    /// Aggregate tests over K cross-fitting fold bundles
    Crossfit(CrossfitArgs),
    /// Known-truth benchmark with synthetic data and an oracle model
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Significance level (default: the bundle manifest's)
    #[arg(long)]
    alpha: Option<f64>,
    /// Null threshold for the median effect (default: the manifest's)
    #[arg(long)]
    m0: Option<f64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// squared | absolute | bce | mce | pinball:TAU (default: training loss)
    #[arg(long, value_parser = parse::<LossKind>)]
    loss: Option<LossKind>,
    /// none | bonferroni
    #[arg(long, value_parser = parse::<Adjust>, default_value = "none")]
    adjust: Adjust,
    /// strict | drop | random-split
    #[arg(long, value_parser = parse::<TieMode>, default_value = "strict")]
    tie_mode: TieMode,
    /// Comma-separated feature names (default: all)
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Test units instead of samples, aggregating trajectories by mean | max
    #[arg(long, value_parser = parse_aggregator)]
    group: Option<TrajectoryAggregator>,
}

#[derive(Args, Debug)]
struct TestArgs {
    bundle: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Restrict to samples matching e.g. `time=3`, `unit=a|b`, `region=north`
    #[arg(long = "where", value_parser = parse::<Predicate>)]
    filter: Option<Predicate>,
    /// json | csv | text
    #[arg(long, value_parser = parse::<ReportFormat>, default_value = "text")]
    format: ReportFormat,
    /// Output file (default: standard output)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossfitArgs {
    /// minp | pooled
    #[arg(long, value_parser = parse::<CrossfitScheme>, default_value = "minp")]
    scheme: CrossfitScheme,
    /// One bundle directory per fold
    #[arg(required = true, num_args = 2..)]
    bundles: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// regression | classification
    #[arg(value_parser = parse::<Task>)]
    task: Task,
    #[arg(long, default_value_t = 10_000)]
    n_test: usize,
    /// Reference partition size (default: n-test)
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// conditional | unconditional
    #[arg(long, value_parser = parse_masking, default_value = "conditional")]
    masking: MaskMode,
    /// Directory for per-trial reports and the summary
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_config(common: &Common, alpha: f64, m0: f64) -> RunConfig {
    RunConfig {
        test: TestConfig {
            alpha,
            m0,
            tie_mode: common.tie_mode,
            seed: common.seed,
        },
        loss: common.loss,
        adjust: common.adjust,
        grouping: common.group,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_test(args: TestArgs) -> Result<()> {
    let loaded = parse_bundle_lenient(&args.bundle)?;
    for (feature, e) in &loaded.feature_errors {
        eprintln!("warning: feature `{feature}` skipped: {e}");
    }
    let manifest = loaded.bundle.manifest();
    let run = run_config(
        &args.common,
        args.common.alpha.unwrap_or(manifest.alpha),
        args.common.m0.unwrap_or(manifest.m0),
    );
    let full = loaded.bundle.view();
    let view = match &args.filter {
        Some(p) => condition_subset(&full, p)?,
        None => full,
    };
    let reports = run_loaded(&loaded, &view, args.common.features.as_deref(), &run)?;
    for r in reports.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: feature `{}` failed: {}", r.feature, r.error.as_deref().unwrap_or(""));
    }
    emit(&emit_report(&reports, args.format)?, args.out.as_deref())
}

fn cmd_crossfit(args: CrossfitArgs) -> Result<()> {
    let folds = args
        .bundles
        .iter()
        .map(|p| parse_bundle_lenient(p).with_context(|| format!("loading fold {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let manifest = folds[0].bundle.manifest();
    let run = run_config(
        &args.common,
        args.common.alpha.unwrap_or(manifest.alpha),
        args.common.m0.unwrap_or(manifest.m0),
    );
    let features = args
        .common
        .features
        .clone()
        .unwrap_or_else(|| manifest.feature_names().map(str::to_owned).collect());
    if args.scheme == CrossfitScheme::Pooled {
        eprintln!("warning: the pooled scheme is heuristic; its size is not guaranteed under cross-fold dependence");
    }
    let reports = run_crossfit(&folds, &features, args.scheme, &run)?;
    for r in reports.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: feature `{}` failed: {}", r.feature, r.error.as_deref().unwrap_or(""));
    }
    let mut text = serde_json::to_string_pretty(&reports)?;
    text.push('\n');
    emit(&text, args.out.as_deref())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut config = BenchConfig::new(args.task, args.n_test, args.trials, args.alpha, args.seed);
    config.n_train = args.n_train;
    config.masking = args.masking;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut outcomes = Vec::with_capacity(args.trials);
    for trial in 0..args.trials {
        let outcome = run_trial(&config, trial)?;
        if let Some(dir) = &args.out {
            let path = dir.join(format!("trial_{trial:03}.json"));
            fs::write(&path, emit_report(&outcome.reports, ReportFormat::Json)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        outcomes.push(outcome);
    }
    let summary = summarize(&config, &outcomes);
    if let Some(dir) = &args.out {
        let mut json = serde_json::to_string_pretty(&summary)?;
        json.push('\n');
        fs::write(dir.join("summary.json"), json)?;
        fs::write(dir.join("summary.txt"), summary.to_text())?;
    }
    print!("{}", summary.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Validate { bundle } => {
            let b = parse_bundle(&bundle)?;
            println!(
                "ok: {} samples, {} features",
                b.len(),
                b.manifest().features.len()
            );
            Ok(())
        }
        Command::Power { n, alpha, s } => {
            println!("{}", power(n, alpha, s)?);
            Ok(())
        }
        Command::Samplesize { s, alpha, power, cap } => {
            println!("{}", required_sample_size_capped(s, alpha, power, cap)?);
            Ok(())
        }
        Command::Crossfit(args) => cmd_crossfit(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
