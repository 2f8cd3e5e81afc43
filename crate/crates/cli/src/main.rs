use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sce_core::analysis::{self, ClusterMetric};
use sce_core::client::{BackendConfig, LlmClient};
use sce_core::dataset::Example;
use sce_core::metrics::{self, MetricTable};
use sce_core::mock::MockBackend;
use sce_core::pipeline::{self, Pipeline, RunConfig, SystemClock};
use sce_core::prompts::{render_rationale_request, render_sce_request, render_step1, TargetLabel};
use sce_core::report::{self, OutputFormat, ReportSpec};
use sce_core::stats::{self, DEFAULT_RESAMPLES};
use sce_core::store::RunStore;
use sce_core::task::{self, Label, Strategy, TaskId, TaskSpec};

const API_KEY_ENV: &str = "SCE_API_KEY";

#[derive(Parser, Debug)]
#[command(name = "sce", version, about = "Evaluate self-generated counterfactual explanations")]
struct Cli {
    /// Seed: overrides the run seed, or seeds resampling and clustering.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: a run config for `run`/`resume`, a report spec for `report`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path; stdout when omitted (required by `run`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the three-step protocol and write a new store.
    Run(RunArgs),
    /// Continue an interrupted store.
    Resume(ResumeArgs),
    /// Metric table with context tests.
    Score(ScoreArgs),
    /// Context tests and length-difference intervals as JSON.
    Stats(StoreArgs),
    /// Readability, length, drift and clustering of valid vs invalid SCEs.
    Analyze(AnalyzeArgs),
    /// Rendered table for one or more stores.
    Report(ReportArgs),
    /// Print every prompt template with placeholder values.
    DumpPrompts(DumpPromptsArgs),
    /// Print the extraction rules as JSON.
    DumpRules,
}

#[derive(Args, Debug)]
struct BackendArgs {
    /// Answer requests from a recorded transcript instead of the network.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Append every exchange to this JSONL transcript.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset JSONL; overrides the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Debug)]
struct StoreArgs {
    #[arg(long = "store", required = true)]
    stores: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Markdown => OutputFormat::Markdown,
            Format::Csv => OutputFormat::Csv,
        }
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    store: PathBuf,
    /// Judge validity by the with-context re-prediction.
    #[arg(long)]
    with_context: bool,
    /// Exported representation file, one row per judged SCE in store order.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Embed originals and SCEs through the store's backend to measure drift.
    #[arg(long)]
    embed: bool,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "store")]
    stores: Vec<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    no_bold: bool,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
}

#[derive(Args, Debug)]
struct DumpPromptsArgs {
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long)]
    strategy: Option<Strategy>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => run(cli, a),
        Command::Resume(a) => resume(cli, a),
        Command::Score(a) => score(cli, a),
        Command::Stats(a) => stats_cmd(cli, a),
        Command::Analyze(a) => analyze(cli, a),
        Command::Report(a) => report_cmd(cli, a),
        Command::DumpPrompts(a) => emit(cli, &dump_prompts(a)?),
        Command::DumpRules => emit(cli, &(serde_json::to_string_pretty(&task::rule_table())? + "\n")),
    }
}

fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_store(path: &Path) -> Result<RunStore> {
    RunStore::load(path).with_context(|| format!("loading store {}", path.display()))
}

fn client(backend: &BackendConfig, args: &BackendArgs) -> Result<LlmClient> {
    let client = match &args.replay {
        Some(path) => {
            let mock = MockBackend::from_transcript(path).with_context(|| format!("reading {}", path.display()))?;
            LlmClient::new(Arc::new(mock), backend.clone())?
        }
        None => LlmClient::http(backend.clone(), std::env::var(API_KEY_ENV).ok())?,
    };
    Ok(match &args.transcript {
        Some(path) => client.with_transcript_file(path)?,
        None => client,
    })
}

fn examples_for(config: &mut RunConfig, dataset: &Option<PathBuf>) -> Result<Vec<Example>> {
    if let Some(d) = dataset {
        config.dataset = Some(d.clone());
    }
    Ok(pipeline::prepare_examples(config)?)
}

fn print_summary(summary: &pipeline::RunSummary) -> Result<()> {
    eprintln!("{}", serde_json::to_string(&json!({
        "written": summary.written,
        "skipped": summary.skipped,
        "complete": summary.complete,
        "step1_unparseable": summary.step1_unparseable,
        "no_rationale": summary.no_rationale,
        "filtered": summary.filtered,
        "failed": summary.failed,
    }))?);
    Ok(())
}

fn run(cli: &Cli, args: &RunArgs) -> Result<()> {
    let Some(config_path) = &cli.config else { bail!("run needs --config") };
    let Some(out) = &cli.out else { bail!("run needs --out") };
    let mut config: RunConfig = read_json(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let examples = examples_for(&mut config, &args.dataset)?;
    let client = client(&config.backend, &args.backend)?;
    let clock = SystemClock;
    let summary = Pipeline::new(&config, &client, &clock)?.run(&examples, out)?;
    print_summary(&summary)
}

fn resume(cli: &Cli, args: &ResumeArgs) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => read_json::<RunConfig>(path)?,
        None => load_store(&args.store)?.header.config,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    // Fails early on a config/store mismatch.
    pipeline::load_checked(&args.store, &config)?;
    let examples = examples_for(&mut config, &args.dataset)?;
    let client = client(&config.backend, &args.backend)?;
    let clock = SystemClock;
    let summary = Pipeline::new(&config, &client, &clock)?.resume(&examples, &args.store)?;
    print_summary(&summary)
}

fn tables(paths: &[PathBuf], resamples: usize, seed: u64) -> Result<(MetricTable, Vec<report::RowTests>)> {
    let mut rows = Vec::new();
    let mut tests = Vec::new();
    for path in paths {
        let store = load_store(path)?;
        rows.push(metrics::score_store(&store));
        tests.push(report::test_store(&store, resamples, seed));
    }
    Ok((MetricTable { rows }, tests))
}

fn score(cli: &Cli, args: &ScoreArgs) -> Result<()> {
    let (table, tests) = tables(&args.stores.stores, args.stores.resamples, cli.seed.unwrap_or(0))?;
    let spec = ReportSpec::new(args.stores.stores.clone(), args.format.into());
    emit(cli, &report::render_table(&table, &tests, &spec)?)
}

fn length_interval(store: &RunStore, with_context: bool, resamples: usize, seed: u64) -> serde_json::Value {
    let (valid, invalid) = metrics::sce_lengths(&store.records, with_context);
    match (
        metrics::norm_len_diff(&valid, &invalid),
        stats::bootstrap_norm_len_diff(&valid, &invalid, resamples, seed),
    ) {
        (Ok(point), Ok(ci)) => json!({ "norm_len_diff": point, "bootstrap": ci }),
        _ => serde_json::Value::Null,
    }
}

fn stats_cmd(cli: &Cli, args: &StoreArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut out = String::new();
    for path in &args.stores {
        let store = load_store(path)?;
        let tests = report::test_store(&store, args.resamples, seed);
        let line = json!({
            "store": path,
            "key": tests.key,
            "val_vs_valc": tests.val,
            "ed_vs_edc": tests.ed,
            "length_without_context": length_interval(&store, false, args.resamples, seed),
            "length_with_context": length_interval(&store, true, args.resamples, seed),
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    emit(cli, &out)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let store = load_store(&args.store)?;
    let judged: Vec<(&sce_core::store::RunRecord, &str, bool)> = store
        .records
        .iter()
        .filter_map(|r| {
            let valid = metrics::is_valid(r, args.with_context)?;
            let sce = r.step2.as_ref()?.sce.as_deref()?;
            Some((r, sce, valid))
        })
        .collect();
    // Means of per-SCE values, grouped by validity.
    let split = |values: Vec<Option<f64>>| {
        let (mut v, mut i) = (Vec::new(), Vec::new());
        for ((_, _, valid), x) in judged.iter().zip(values) {
            if let Some(x) = x {
                if *valid { v.push(x) } else { i.push(x) }
            }
        }
        json!({ "valid": mean(&v), "invalid": mean(&i) })
    };
    let reading_ease = split(judged.iter().map(|(_, sce, _)| analysis::flesch_reading_ease(sce).ok()).collect());

    let drift = if args.embed {
        let client = LlmClient::http(store.header.config.backend.clone(), std::env::var(API_KEY_ENV).ok())?;
        let mut values = Vec::new();
        for (r, sce, _) in &judged {
            let (a, b) = (client.embed(&r.original)?, client.embed(sce)?);
            values.push(Some(analysis::drift(a.values(), b.values())?));
        }
        split(values)
    } else {
        serde_json::Value::Null
    };

    let clustering = match &args.vectors {
        Some(path) => {
            let flags: Vec<bool> = judged.iter().map(|(_, _, v)| *v).collect();
            let set = analysis::load_vectors(path, &flags)?;
            let mut rows = Vec::new();
            for metric in ClusterMetric::ALL {
                let res = analysis::kmeans2(&set.vectors, metric, seed)?;
                let (d0, d1) = analysis::cluster_deltas(&res.assignments, &set.labels)?;
                rows.push(json!({ "metric": metric.as_str(), "delta0": d0, "delta1": d1, "iterations": res.iterations }));
            }
            json!({ "variant": set.variant, "results": rows })
        }
        None => serde_json::Value::Null,
    };

    let valid = judged.iter().filter(|(_, _, v)| *v).count();
    let doc = json!({
        "store": args.store,
        "condition": if args.with_context { "with_context" } else { "without_context" },
        "valid": valid,
        "invalid": judged.len() - valid,
        "reading_ease": reading_ease,
        "length": length_interval(&store, args.with_context, args.resamples, seed),
        "drift": drift,
        "clustering": clustering,
    });
    emit(cli, &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn report_cmd(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let mut spec = match &cli.config {
        Some(path) => read_json::<ReportSpec>(path)?,
        None => ReportSpec::new(Vec::new(), OutputFormat::Markdown),
    };
    spec.inputs.extend(args.stores.iter().cloned());
    if let Some(f) = args.format {
        spec.format = f.into();
    }
    if let Some(a) = args.alpha {
        spec.significance_alpha = a;
    }
    if args.no_bold {
        spec.bold_significant = false;
    }
    spec.validate()?;
    let (table, tests) = tables(&spec.inputs, args.resamples, cli.seed.unwrap_or(0))?;
    emit(cli, &report::render_table(&table, &tests, &spec)?)
}

fn dump_prompts(args: &DumpPromptsArgs) -> Result<String> {
    let mut out = String::new();
    let tasks: Vec<TaskId> = args.task.map_or(TaskId::ALL.to_vec(), |t| vec![t]);
    let strategies: Vec<Strategy> = args.strategy.map_or(Strategy::ALL.to_vec(), |s| vec![s]);
    for task_id in tasks {
        let task = TaskSpec::builtin(task_id);
        let fields = task.field_names.iter().map(|f| (f.clone(), format!("{{{}}}", f.to_uppercase()))).collect();
        let example = Example { example_id: "template".into(), fields, gold: None };
        let original = Label::from("<Original Answer>");
        let target = TargetLabel { value: Label::from("<Target>"), source_prediction: original.clone() };
        for &strategy in &strategies {
            let mut section = |step: &str, text: &str| {
                out.push_str(&format!("===== {task_id} / {strategy} / {step} =====\n{text}\n\n"));
            };
            let mut conv = render_step1(&task, &example, strategy)?;
            section("step1", &conv.messages()[0].content);
            conv.push_assistant("ANSWER: <Original Answer>")?;
            if strategy == Strategy::RationaleBased {
                let req = render_rationale_request(&task, &original);
                section("rationale", &req);
                conv.push_user(req)?;
                conv.push_assistant("RATIONALES:\n- <rationale>")?;
            }
            let step2 = render_sce_request(&task, strategy, &target, &conv)?;
            section("step2", &step2.last().expect("non-empty").content);
        }
    }
    Ok(out)
}
