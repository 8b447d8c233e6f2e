//! Command-line front end.
//!
//! Exit codes: 0 success, 1 operational failure, 2 degenerate result under
//! `--strict`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataset::{load_manifest, Dataset};
use crate::error::{Error, Result};
use crate::masking::FillStrategy;
use crate::metric::{
    default_plans, resolve_fills, run_analysis, ContributionOptions, ContributionReport,
    DistanceTable, RunOptions, ScoreMode, DEFAULT_COLLAPSE_THRESHOLD,
};
use crate::model::{open_model, server, Model, ModelOptions, PostTransform};
use crate::report::{
    render, write_artifacts, write_report, RenderRequest, ReportDocument, RunMetadata,
};
use crate::selftest;

pub const TIMEOUT_ENV: &str = "MODCONTRIB_TIMEOUT";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_LOG_FILE: &str = "run_log.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DEGENERATE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "modcontrib",
    version,
    about = "Modality contribution analysis for black-box multimodal models"
)]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the occlusion analysis and write a report.
    Analyze(AnalyzeArgs),
    /// Regenerate heatmaps and score tables from a stored report.
    Render(RenderArgs),
    /// Run the embedded oracle checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Answer protocol requests on stdin/stdout with a built-in model.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PostTransformArg {
    None,
    Softmax,
    Sigmoid,
}

impl From<PostTransformArg> for PostTransform {
    fn from(v: PostTransformArg) -> Self {
        match v {
            PostTransformArg::None => PostTransform::None,
            PostTransformArg::Softmax => PostTransform::Softmax,
            PostTransformArg::Sigmoid => PostTransform::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// builtin:<json|@file>, exec:<command> or http:<url>
    #[arg(long)]
    pub model: String,
    /// Output directory for report, run log and artifacts.
    #[arg(long, short)]
    pub out: PathBuf,
    /// zero | mean | token:<symbol>; overrides the manifest's fill.
    #[arg(long, value_parser = parse_fill)]
    pub fill: Option<FillStrategy>,
    /// Keep per-class scores and write MAX heatmaps and score tables.
    #[arg(long)]
    pub per_class: bool,
    #[arg(long, value_enum, default_value = "none")]
    pub post_transform: PostTransformArg,
    #[arg(long, default_value_t = DEFAULT_COLLAPSE_THRESHOLD)]
    pub collapse_threshold: f64,
    /// Exit with 2 when the result is degenerate.
    #[arg(long)]
    pub strict: bool,
    /// Maximum concurrent model calls.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Per-call timeout for external models, in seconds.
    #[arg(long, env = TIMEOUT_ENV, default_value_t = 60.0)]
    pub timeout: f64,
    /// Re-issue every baseline call at the end and fail if outputs drifted.
    #[arg(long)]
    pub recheck: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderWhat {
    Heatmaps,
    Tables,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mean,
    Max,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "heatmaps")]
    pub what: RenderWhat,
    #[arg(long, value_enum, default_value = "mean")]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Manifest declaring the modalities the model expects.
    #[arg(long)]
    pub manifest: PathBuf,
    /// builtin:<json|@file>
    #[arg(long)]
    pub model: String,
    /// Batch limit announced in the handshake.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

fn parse_fill(s: &str) -> std::result::Result<FillStrategy, String> {
    FillStrategy::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct RunSettings<'a> {
    manifest: &'a Path,
    model: &'a str,
    fill: Option<String>,
    per_class: bool,
    post_transform: &'static str,
    collapse_threshold: f64,
    strict: bool,
    jobs: usize,
    timeout_secs: f64,
    recheck: bool,
}

#[derive(Debug, Serialize)]
struct RunLog<'a> {
    command: &'static str,
    settings: RunSettings<'a>,
    samples: usize,
    model_calls: usize,
    wall_time_secs: f64,
    degenerate: bool,
    exit_code: i32,
    artifacts: Vec<PathBuf>,
}

/// Result of one analysis, before anything is written.
pub struct AnalyzeOutcome {
    pub table: DistanceTable,
    pub report: ContributionReport,
    pub document: ReportDocument,
}

/// Runs the whole pipeline against an already opened model.
pub fn analyze_dataset(
    dataset: &Dataset,
    model: &dyn Model,
    args: &AnalyzeArgs,
) -> Result<AnalyzeOutcome> {
    if !(0.0..=1.0).contains(&args.collapse_threshold) {
        return Err(Error::Invalid(format!(
            "collapse threshold {} is outside [0, 1]",
            args.collapse_threshold
        )));
    }
    let plans = default_plans(dataset)?;
    let fills = resolve_fills(dataset, args.fill.as_ref())?;
    let post_transform: PostTransform = args.post_transform.into();
    let table = run_analysis(
        dataset,
        model,
        &plans,
        &fills,
        &RunOptions {
            jobs: args.jobs.max(1),
            post_transform,
            recheck: args.recheck,
        },
    )?;
    let report = ContributionReport::from_table(
        &table,
        &ContributionOptions {
            per_class: args.per_class,
            collapse_threshold: args.collapse_threshold,
        },
    );
    let fill_labels = dataset
        .modalities()
        .iter()
        .map(|spec| match (&args.fill, spec.kind.is_text()) {
            (Some(f @ FillStrategy::MaskToken(_)), true) => f.label(),
            (Some(FillStrategy::MaskToken(_)), false) | (_, true) | (None, _) => spec.fill.label(),
            (Some(f), false) => f.label(),
        })
        .collect();
    let document = write_report(
        &report,
        &table,
        dataset,
        &RunMetadata {
            model_name: model.name(),
            post_transform: post_transform.label().into(),
            fills: fill_labels,
            per_class: args.per_class,
        },
    )?;
    Ok(AnalyzeOutcome {
        table,
        report,
        document,
    })
}

fn model_options(timeout: f64, jobs: usize) -> Result<ModelOptions> {
    if !(timeout.is_finite() && timeout > 0.0) {
        return Err(Error::Invalid(format!(
            "timeout must be a positive number of seconds, got {timeout}"
        )));
    }
    Ok(ModelOptions {
        timeout: Duration::from_secs_f64(timeout),
        in_flight: jobs.max(1),
    })
}

/// Runs an analysis and writes report, artifacts and run log to `args.out`.
/// Prints nothing; returns the document and the exit code it implies.
pub fn analyze_to_dir(args: &AnalyzeArgs) -> Result<(ReportDocument, i32)> {
    let start = Instant::now();
    let manifest = load_manifest(&args.manifest)?;
    let dataset = manifest.load_dataset()?;
    let model = open_model(
        &args.model,
        dataset.modalities(),
        &model_options(args.timeout, args.jobs)?,
    )?;
    let outcome = analyze_dataset(&dataset, model.as_ref(), args)?;
    drop(model);
    let doc = outcome.document;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let report_path = args.out.join(REPORT_FILE);
    std::fs::write(&report_path, doc.to_json()).map_err(|e| Error::io(&report_path, e))?;
    let mut artifacts = vec![report_path];
    artifacts.extend(write_artifacts(
        &args.out,
        &render(
            &doc,
            RenderRequest {
                heatmaps: true,
                tables: false,
                mode: ScoreMode::Mean,
            },
        )?,
    )?);
    if args.per_class {
        artifacts.extend(write_artifacts(
            &args.out,
            &render(
                &doc,
                RenderRequest {
                    heatmaps: true,
                    tables: true,
                    mode: ScoreMode::Max,
                },
            )?,
        )?);
    }

    let exit_code = if doc.degenerate && args.strict {
        EXIT_DEGENERATE
    } else {
        EXIT_OK
    };
    let log = RunLog {
        command: "analyze",
        settings: RunSettings {
            manifest: &args.manifest,
            model: &args.model,
            fill: args.fill.as_ref().map(FillStrategy::label),
            per_class: args.per_class,
            post_transform: PostTransform::from(args.post_transform).label(),
            collapse_threshold: args.collapse_threshold,
            strict: args.strict,
            jobs: args.jobs,
            timeout_secs: args.timeout,
            recheck: args.recheck,
        },
        samples: outcome.table.sample_count(),
        model_calls: outcome.table.model_calls(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        degenerate: doc.degenerate,
        exit_code,
        artifacts,
    };
    let log_path = args.out.join(RUN_LOG_FILE);
    let mut text = serde_json::to_string_pretty(&log).expect("run log serializes");
    text.push('\n');
    std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    log::info!(
        "{} model calls in {:.3}s",
        log.model_calls,
        log.wall_time_secs
    );
    Ok((doc, exit_code))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32> {
    let (doc, exit_code) = analyze_to_dir(args)?;
    let names = doc
        .modalities
        .iter()
        .map(|s| s.name.as_str())
        .collect::<Vec<_>>()
        .join(" : ");
    println!("m ({names}) = {}", doc.ratio);
    for name in &doc.collapsed {
        let m = doc
            .modalities
            .iter()
            .find(|s| &s.name == name)
            .map_or(0.0, |s| s.m);
        eprintln!(
            "warning: modality {name:?} contributes m = {m:.4} <= {} (possible modality collapse)",
            doc.settings.collapse_threshold
        );
    }
    if doc.degenerate {
        eprintln!(
            "warning: no occlusion changed the model output; m is uniform and flagged degenerate"
        );
    }
    Ok(exit_code)
}

pub fn cmd_render(args: &RenderArgs) -> Result<i32> {
    let doc = ReportDocument::read(&args.report)?;
    let request = RenderRequest {
        heatmaps: matches!(args.what, RenderWhat::Heatmaps | RenderWhat::All),
        tables: matches!(args.what, RenderWhat::Tables | RenderWhat::All),
        mode: match args.mode {
            ModeArg::Mean => ScoreMode::Mean,
            ModeArg::Max => ScoreMode::Max,
        },
    };
    let artifacts = render(&doc, request)?;
    if artifacts.is_empty() {
        eprintln!("nothing to render: the report has no modality matching the request");
    }
    for path in write_artifacts(&args.out, &artifacts)? {
        println!("{}", path.display());
    }
    Ok(EXIT_OK)
}

pub fn cmd_selftest(inject_fault: bool) -> i32 {
    let start = Instant::now();
    let results = selftest::run(inject_fault);
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {failed} failed, {:.2}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

pub fn cmd_serve(args: &ServeArgs) -> Result<i32> {
    if !args.model.starts_with("builtin:") {
        return Err(Error::Invalid(
            "serve only wraps builtin:<spec> models".into(),
        ));
    }
    let manifest = load_manifest(&args.manifest)?;
    let model = open_model(&args.model, &manifest.modalities, &ModelOptions::default())?;
    let names: Vec<String> = manifest.modalities.iter().map(|m| m.name.clone()).collect();
    let stdin = std::io::stdin();
    server::serve(
        model.as_ref(),
        &names,
        args.batch,
        stdin.lock(),
        std::io::stdout().lock(),
    )
    .map_err(|e| Error::io("<stdio>", e))?;
    Ok(EXIT_OK)
}

/// Dispatches a parsed command line; errors become exit code 1.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Render(args) => cmd_render(args),
        Command::Selftest { inject_fault } => Ok(cmd_selftest(*inject_fault)),
        Command::Serve(args) => cmd_serve(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            EXIT_FAILURE
        }
    }
}
