mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use guide_core::embedding::EmbeddingProvider;
use guide_core::grader::{Grader, GraderBackend, PromptTemplate, ResponseCache};
use guide_core::harness::{generate_task, SyntheticBackend, TaskConfig};
use guide_core::llm::{ChatBackend, HttpEmbedder};
use guide_core::metrics::{MethodReport, RunReport, SplitMetrics};
use guide_core::pipeline::{self, FrozenSet, PipelineError};
use guide_core::{Dataset, SizeBounds};

use config::{BackendKind, RunConfig};

/// Few-shot exemplar optimization for rubric-based LLM grading.
#[derive(Debug, Parser)]
#[command(name = "guide", version)]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full optimization loop and evaluate the selected set on test.
    Optimize {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        opt: OptimizerArgs,
        /// Stop after this round; rerunning the same command resumes.
        #[arg(long)]
        stop_after: Option<u32>,
    },
    /// Grade a JSONL file of responses with a frozen exemplar set.
    Grade {
        /// `final_set.json` written by `optimize`.
        #[arg(long)]
        exemplars: PathBuf,
        /// JSONL records with `response` and optional `id` and `label`.
        #[arg(long)]
        input: PathBuf,
        /// Predictions file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Evaluate a baseline exemplar choice with the same template and metrics.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        /// Subset size for the random baseline.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge report.json files and print the comparison table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the merged report.json and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic task in the standard dataset layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        labels: u32,
        #[arg(long, default_value_t = 150)]
        items: usize,
        #[arg(long, default_value_t = guide_core::harness::DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = TaskConfig::default().noise)]
        noise: f64,
        #[arg(long, default_value_t = TaskConfig::default().boundary_fraction)]
        boundary_fraction: f64,
        #[arg(long, default_value_t = 0)]
        experts_per_label: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
    Naive,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory (train/validation/test JSONL and rubric.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    rubric: Option<PathBuf>,
    /// Number of score levels.
    #[arg(long)]
    labels: Option<u32>,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    embedding_model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads for parallel grading.
    #[arg(long)]
    threads: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    word_budget: Option<usize>,
}

#[derive(Debug, Args)]
struct OptimizerArgs {
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    pool_capacity: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl DataArgs {
    fn apply(self, c: &mut RunConfig) {
        set_opt(&mut c.data.dir, self.data);
        set_opt(&mut c.data.train, self.train);
        set_opt(&mut c.data.validation, self.validation);
        set_opt(&mut c.data.test, self.test);
        set_opt(&mut c.data.rubric, self.rubric);
        set_opt(&mut c.data.labels, self.labels);
    }
}

impl BackendArgs {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.backend.kind, self.backend);
        set(&mut c.backend.model, self.model);
        set(&mut c.backend.embedding_model, self.embedding_model);
        set(&mut c.backend.base_url, self.base_url);
        set(&mut c.backend.temperature, self.temperature);
    }
}

impl RunArgs {
    fn apply(self, c: &mut RunConfig) {
        set_opt(&mut c.run.out, self.out);
        set_opt(&mut c.run.cache_dir, self.cache_dir);
        set_opt(&mut c.run.threads, self.threads);
        if self.sequential {
            c.run.parallel = false;
        }
        set(&mut c.run.word_budget, self.word_budget);
    }
}

impl OptimizerArgs {
    fn apply(self, c: &mut RunConfig) {
        let o = &mut c.optimizer;
        set(&mut o.rounds, self.rounds);
        set(&mut o.n_eval, self.n_eval);
        set(&mut o.n_init, self.n_init);
        o.bounds = SizeBounds::new(self.k_min.unwrap_or(o.bounds.min), self.k_max.unwrap_or(o.bounds.max));
        set(&mut o.tau, self.tau);
        set(&mut o.candidate_count, self.candidates);
        set(&mut o.pool_capacity, self.pool_capacity);
        set(&mut o.seed, self.seed);
    }
}

/// Marks errors that should exit with the backend-failure code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct BackendFailure(String);

const EXIT_VALIDATION: u8 = 1;
const EXIT_BACKEND: u8 = 2;
const EXIT_INTERRUPTED: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Interrupted { .. } => EXIT_INTERRUPTED,
                p if p.is_backend_failure() => EXIT_BACKEND,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<BackendFailure>() || cause.is::<guide_core::grader::BackendError>() {
            return EXIT_BACKEND;
        }
    }
    EXIT_VALIDATION
}

struct Services {
    grader: Box<dyn GraderBackend>,
    embedder: Box<dyn EmbeddingProvider>,
}

fn services(c: &RunConfig) -> Result<Services> {
    let b = &c.backend;
    Ok(match b.kind {
        BackendKind::Synthetic => Services {
            grader: Box::new(SyntheticBackend::new(b.synthetic_dim)),
            embedder: Box::new(SyntheticBackend::new(b.synthetic_dim)),
        },
        BackendKind::Http => {
            let key = std::env::var(&b.api_key_env).ok().filter(|k| !k.is_empty());
            if key.is_none() {
                log::warn!("{} is not set; sending requests without credentials", b.api_key_env);
            }
            let fail = |e: guide_core::grader::BackendError| BackendFailure(e.to_string());
            Services {
                grader: Box::new(ChatBackend::new(b.http_settings(&b.model), key.clone()).map_err(fail)?),
                embedder: Box::new(HttpEmbedder::new(b.http_settings(&b.embedding_model), key).map_err(fail)?),
            }
        }
    })
}

fn make_grader<'a>(backend: &'a dyn GraderBackend, template: PromptTemplate, cache_dir: &Path, c: &RunConfig) -> Result<Grader<&'a dyn GraderBackend>> {
    let cache = ResponseCache::on_disk(cache_dir.to_owned())
        .with_context(|| format!("creating cache directory {}", cache_dir.display()))?;
    Ok(Grader::new(backend, cache, template, c.execution()))
}

fn load_dataset(c: &RunConfig) -> Result<Dataset> {
    Ok(c.data.files()?.load(c.data.labels)?)
}

fn configure_threads(c: &RunConfig) {
    if let Some(n) = c.run.threads {
        if !guide_core::exec::configure_threads(n) {
            log::warn!("could not set the worker count to {n}");
        }
    }
}

fn cmd_optimize(c: &RunConfig, stop_after: Option<u32>) -> Result<()> {
    c.optimizer.validate()?;
    configure_threads(c);
    let dataset = load_dataset(c)?;
    let out = c.out_dir()?;
    let svc = services(c)?;
    let grader = make_grader(svc.grader.as_ref(), PromptTemplate::from_dataset(&dataset), &c.cache_dir()?, c)?;
    let outcome = pipeline::optimize(&dataset, &grader, &svc.embedder.as_ref(), &c.pipeline(), c.echo(), out, stop_after)?;
    print!("{}", outcome.report.to_table());
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn write_predictions(out: Option<&Path>, predictions: &[guide_core::grader::Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_grade(c: &RunConfig, exemplars: &Path, input: &Path, output: Option<&Path>, cache_dir: Option<PathBuf>) -> Result<()> {
    configure_threads(c);
    let frozen = FrozenSet::load(exemplars)?;
    let lines = pipeline::read_lines(input)?;
    let svc = services(c)?;
    let cache_dir = cache_dir.or_else(|| exemplars.parent().map(|p| p.join("cache"))).unwrap_or_else(|| "cache".into());
    let grader = make_grader(svc.grader.as_ref(), frozen.template(), &cache_dir, c)?;
    let outcome = pipeline::grade_lines(&frozen, &grader, &lines);
    write_predictions(output, &outcome.predictions)?;
    let labelled: Vec<_> = outcome.predictions.iter().filter(|p| p.label.is_some()).cloned().collect();
    if !labelled.is_empty() {
        if let Ok(m) = SplitMetrics::from_predictions("input", frozen.template().label_set, &labelled) {
            eprintln!("accuracy {:.4}  qwk {:.4}  on {} labelled records", m.accuracy, m.qwk, m.items);
        }
    }
    if outcome.too_many_failures() {
        return Err(BackendFailure(format!(
            "{} of {} records failed at the backend",
            outcome.backend_failures,
            outcome.predictions.len()
        ))
        .into());
    }
    if outcome.schema_errors > 0 {
        bail!("{} records did not match the input schema", outcome.schema_errors);
    }
    Ok(())
}

fn cmd_baseline(c: &RunConfig, kind: BaselineKind, k: Option<usize>, seed: Option<u64>) -> Result<()> {
    configure_threads(c);
    let dataset = load_dataset(c)?;
    let out = c.out_dir()?;
    let svc = services(c)?;
    let grader = make_grader(svc.grader.as_ref(), PromptTemplate::from_dataset(&dataset), &c.cache_dir()?, c)?;
    let seed = seed.unwrap_or(c.optimizer.seed);
    let k = k.unwrap_or(c.run.random_k);
    let method: MethodReport = match kind {
        BaselineKind::Naive => pipeline::naive_baseline(&dataset, &grader)?,
        BaselineKind::Random => {
            let (pool, _) = pipeline::bootstrap_pool(&dataset, &grader, &c.pipeline())?;
            pipeline::random_baseline(&dataset, &pool, &grader, k, seed)?
        }
    };
    let mut echo = c.echo();
    echo["baseline"] = serde_json::json!({"kind": format!("{kind:?}").to_lowercase(), "k": k, "seed": seed});
    let mut report = RunReport::new(dataset.label_set, echo);
    report.methods.push(method);
    pipeline::write_report(out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut reports = paths.iter().map(|p| pipeline::read_report(p).with_context(|| format!("reading {}", p.display())));
    let mut merged = reports.next().ok_or_else(|| anyhow!("no reports given"))??;
    for r in reports {
        let r = r?;
        if r.label_count != merged.label_count {
            bail!("reports cover different label counts ({} and {})", merged.label_count, r.label_count);
        }
        merged.merge(r);
    }
    if let Some(dir) = out {
        pipeline::write_report(dir, &merged)?;
    }
    print!("{}", merged.to_table());
    Ok(())
}

fn cmd_synth(out: &Path, task: TaskConfig, seed: u64) -> Result<()> {
    if task.labels < 2 {
        bail!("a task needs at least two labels");
    }
    let (dataset, manifest) = generate_task(&task, seed);
    dataset.write_dir(out)?;
    let path = out.join("task.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    eprintln!(
        "wrote {} train, {} validation, {} test items to {}",
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut c = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Optimize { data, backend, run, opt, stop_after } => {
            data.apply(&mut c);
            backend.apply(&mut c);
            run.apply(&mut c);
            opt.apply(&mut c);
            cmd_optimize(&c, stop_after)
        }
        Command::Grade { exemplars, input, output, backend, cache_dir } => {
            backend.apply(&mut c);
            cmd_grade(&c, &exemplars, &input, output.as_deref(), cache_dir.or(c.run.cache_dir.clone()))
        }
        Command::Baseline { kind, k, data, backend, run, seed } => {
            data.apply(&mut c);
            backend.apply(&mut c);
            run.apply(&mut c);
            cmd_baseline(&c, kind, k, seed)
        }
        Command::Report { reports, out } => cmd_report(&reports, out.as_deref()),
        Command::SynthData { out, labels, items, dim, noise, boundary_fraction, experts_per_label, seed } => {
            let task = TaskConfig { labels, items, dim, noise, boundary_fraction, experts_per_label, ..Default::default() };
            cmd_synth(&out, task, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
