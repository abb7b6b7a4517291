//! End-to-end runs: pool bootstrap, alternating search and regeneration
//! rounds, baselines, frozen-set inference, and the on-disk run layout.
//!
//! Layout of an output directory:
//!
//! ```text
//! run.lock                  held while a process owns the directory
//! config.json               configuration echo
//! pool_{p}.jsonl            pool snapshot p (round t searches snapshot t-1)
//! rationales_{p}.jsonl      audit log of the phase that produced snapshot p
//! similarity_{p}.bin        pairwise similarities of snapshot p
//! round_{t}/observations.jsonl
//! round_{t}/timings.jsonl
//! round_{t}/summary.json
//! state.json                last completed round
//! final_set.json            frozen demonstration set
//! report.json, report.txt
//! predictions_test.jsonl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_jsonl, write_jsonl, Dataset, DatasetError, Item};
use crate::embedding::{embed_pool, EmbedError, EmbeddingProvider, SimilarityMatrix};
use crate::exec::Execution;
use crate::exemplar::{DemonstrationSet, Exemplar, ExemplarPool, Label, LabelSet, PoolError};
use crate::grader::{sha256_hex, GradeError, Grader, GraderBackend, Prediction, PromptTemplate, MAX_FAILURE_FRACTION};
use crate::metrics::{MethodReport, MetricsError, RunReport, SplitMetrics};
use crate::optimizer::{
    run_round, stream_rng, CandidateSpace, OptimizerConfig, OptimizerError, RoundInputs, RoundOutcome,
};
use crate::rationale::{bootstrap_rationales, run_generation_phase, RationaleError, RationaleRecord, DEFAULT_WORD_BUDGET};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("existing run in {0} was started with a different configuration")]
    ConfigMismatch(PathBuf),
    #[error("{path} is corrupt: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("stopped after round {round}; rerun to resume")]
    Interrupted { round: u32 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Grade(#[from] GradeError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Rationale(#[from] RationaleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Whether the failure came from a model or embedding service rather
    /// than from invalid input or local state.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            PipelineError::Grade(_) | PipelineError::Embedding(_) => true,
            PipelineError::Optimizer(OptimizerError::Grade(_)) => true,
            PipelineError::Rationale(RationaleError::TooManyFailures { .. }) => true,
            _ => false,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_owned(), source }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt { path: path.to_owned(), message: e.to_string() })
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                let _ = fs::write(&path, std::process::id().to_string());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_owned())),
            Err(e) => Err(PipelineError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub optimizer: OptimizerConfig,
    pub word_budget: usize,
    pub random_k: usize,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            word_budget: DEFAULT_WORD_BUDGET,
            random_k: 8,
            execution: Execution::default(),
        }
    }
}

/// Progress marker written after every completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub completed_rounds: u32,
    pub rounds: u32,
    /// Selected set of the last completed round, indexed into its snapshot.
    pub last_best: Option<DemonstrationSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenExemplar {
    pub pool_index: usize,
    #[serde(flatten)]
    pub exemplar: Exemplar,
}

fn frozen_members(set: &DemonstrationSet, pool: &ExemplarPool) -> Vec<FrozenExemplar> {
    set.prompt_order(pool)
        .into_iter()
        .map(|(pool_index, e)| FrozenExemplar { pool_index, exemplar: Exemplar { embedding: None, ..e.clone() } })
        .collect()
}

/// A demonstration set with everything needed to grade without the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenSet {
    pub instruction: String,
    pub rubric: String,
    pub label_count: u32,
    pub pool_snapshot: u32,
    /// Exemplars in prompt order.
    pub exemplars: Vec<FrozenExemplar>,
}

impl FrozenSet {
    pub fn new(template: &PromptTemplate, set: &DemonstrationSet, pool: &ExemplarPool) -> Self {
        Self {
            instruction: template.instruction.clone(),
            rubric: template.rubric.clone(),
            label_count: template.label_set.len() as u32,
            pool_snapshot: pool.round(),
            exemplars: frozen_members(set, pool),
        }
    }

    pub fn template(&self) -> PromptTemplate {
        PromptTemplate::new(self.instruction.clone(), self.rubric.clone(), LabelSet::new(self.label_count))
    }

    pub fn demos(&self) -> Vec<&Exemplar> {
        self.exemplars.iter().map(|f| &f.exemplar).collect()
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObservationTiming {
    ordinal: usize,
    wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub pool_snapshot: u32,
    pub pool_size: usize,
    pub evaluations: usize,
    pub best_ordinal: usize,
    pub accuracy: f64,
    pub contrastive: f64,
    pub size: usize,
    pub exemplars: Vec<FrozenExemplar>,
}

/// Result of a completed optimization run.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub report: RunReport,
    pub final_set: FrozenSet,
    pub test_predictions: Vec<Prediction>,
}

pub fn pool_path(dir: &Path, snapshot: u32) -> PathBuf {
    dir.join(format!("pool_{snapshot}.jsonl"))
}

pub fn round_dir(dir: &Path, round: u32) -> PathBuf {
    dir.join(format!("round_{round}"))
}

fn load_pool(dir: &Path, snapshot: u32, capacity: usize) -> Result<ExemplarPool, PipelineError> {
    let members: Vec<Exemplar> = read_jsonl(&pool_path(dir, snapshot))?;
    Ok(ExemplarPool::new(members, capacity, snapshot)?)
}

fn save_pool(dir: &Path, pool: &ExemplarPool, audit: &[RationaleRecord]) -> Result<(), PipelineError> {
    write_jsonl(&dir.join(format!("rationales_{}.jsonl", pool.round())), audit)?;
    write_jsonl(&pool_path(dir, pool.round()), pool.members())?;
    Ok(())
}

fn metrics_for(split: &str, labels: LabelSet, preds: &[Prediction]) -> Result<SplitMetrics, PipelineError> {
    Ok(SplitMetrics::from_predictions(split, labels, preds)?)
}

/// Evaluates `demos` on validation and, when present, test.
fn method_report<B: GraderBackend>(
    method: &str,
    demos: &[&Exemplar],
    dataset: &Dataset,
    grader: &Grader<B>,
) -> Result<(MethodReport, Vec<Prediction>), PipelineError> {
    let labels = dataset.label_set;
    let val = grader.evaluate_demos(demos, &dataset.validation)?;
    let mut splits = vec![metrics_for("validation", labels, &val.predictions)?];
    let mut test_preds = Vec::new();
    if !dataset.test.is_empty() {
        test_preds = grader.evaluate_demos(demos, &dataset.test)?.predictions;
        splits.push(metrics_for("test", labels, &test_preds)?);
    }
    Ok((MethodReport { method: method.to_owned(), splits }, test_preds))
}

/// Initial pool: expert exemplars plus one generated rationale per other
/// training item.
pub fn bootstrap_pool<B: GraderBackend>(
    dataset: &Dataset,
    grader: &Grader<B>,
    config: &PipelineConfig,
) -> Result<(ExemplarPool, Vec<RationaleRecord>), PipelineError> {
    Ok(bootstrap_rationales(dataset, grader, config.optimizer.pool_capacity, config.word_budget)?)
}

/// Searches snapshot `pool` for round `round`.
pub fn search_round<B: GraderBackend, P: EmbeddingProvider>(
    pool: &mut ExemplarPool,
    dataset: &Dataset,
    grader: &Grader<B>,
    embedder: &P,
    config: &PipelineConfig,
    round: u32,
) -> Result<(RoundOutcome, SimilarityMatrix), PipelineError> {
    embed_pool(pool, embedder, config.execution)?;
    let sims = SimilarityMatrix::from_pool(pool, config.execution)?;
    let labels = pool.labels();
    let experts = pool.expert_indices();
    let expert = (!experts.is_empty()).then(|| DemonstrationSet::new(experts, pool.round()));
    let opt = &config.optimizer;
    let space = CandidateSpace {
        labels: &labels,
        sims: &sims,
        tau: opt.tau,
        bounds: opt.bounds,
        candidate_count: opt.candidate_count,
        expert: expert.as_ref(),
        pool_round: pool.round(),
    };
    let inputs = RoundInputs { space, n_eval: opt.n_eval, n_init: opt.n_init, force_expert: round == 1 };
    let mut rng = stream_rng(opt.seed, round, "search");
    let snapshot: &ExemplarPool = pool;
    let outcome = run_round(&inputs, &mut rng, |set| {
        grader.evaluate(set, snapshot, &dataset.validation).map(|r| r.accuracy)
    })?;
    Ok((outcome, sims))
}

fn write_round(dir: &Path, round: u32, pool: &ExemplarPool, outcome: &RoundOutcome) -> Result<(), PipelineError> {
    let rdir = round_dir(dir, round);
    fs::create_dir_all(&rdir).map_err(io(&rdir))?;
    write_jsonl(&rdir.join("observations.jsonl"), &outcome.history)?;
    let timings: Vec<ObservationTiming> = outcome
        .wall_seconds
        .iter()
        .enumerate()
        .map(|(ordinal, &wall_seconds)| ObservationTiming { ordinal, wall_seconds })
        .collect();
    write_jsonl(&rdir.join("timings.jsonl"), &timings)?;
    let best = outcome.best_observation();
    let summary = RoundSummary {
        round,
        pool_snapshot: pool.round(),
        pool_size: pool.len(),
        evaluations: outcome.history.len(),
        best_ordinal: best.ordinal,
        accuracy: best.accuracy,
        contrastive: best.contrastive,
        size: best.size,
        exemplars: frozen_members(&best.subset, pool),
    };
    write_json(&rdir.join("summary.json"), &summary)
}

/// Full optimization run persisted under `out`, resuming from `state.json`
/// when present. `echo` is stored as the configuration echo of the report;
/// it must not contain machine-specific values if reports are to be
/// compared across runs. With `stop_after = Some(t)` the run returns
/// [`PipelineError::Interrupted`] once round `t < T` is complete.
pub fn optimize<B: GraderBackend, P: EmbeddingProvider>(
    dataset: &Dataset,
    grader: &Grader<B>,
    embedder: &P,
    config: &PipelineConfig,
    echo: serde_json::Value,
    out: &Path,
    stop_after: Option<u32>,
) -> Result<OptimizeOutcome, PipelineError> {
    config.optimizer.validate()?;
    let _lock = RunLock::acquire(out)?;
    let opt = &config.optimizer;

    let config_path = out.join("config.json");
    let state_path = out.join("state.json");
    let state: Option<RunState> = if state_path.exists() { Some(read_json(&state_path)?) } else { None };
    if state.is_some() && config_path.exists() {
        let previous: serde_json::Value = read_json(&config_path)?;
        if previous != echo {
            return Err(PipelineError::ConfigMismatch(out.to_owned()));
        }
    }
    write_json(&config_path, &echo)?;

    let (mut pool, mut state) = match state {
        Some(s) => {
            log::info!("resuming after round {}", s.completed_rounds);
            (load_pool(out, s.completed_rounds.min(opt.rounds - 1), opt.pool_capacity)?, s)
        }
        None => {
            log::info!("bootstrapping rationales for {} training items", dataset.train.len());
            let (pool, audit) = bootstrap_pool(dataset, grader, config)?;
            save_pool(out, &pool, &audit)?;
            let s = RunState { completed_rounds: 0, rounds: opt.rounds, last_best: None };
            write_json(&state_path, &s)?;
            (pool, s)
        }
    };

    for t in state.completed_rounds + 1..=opt.rounds {
        log::info!("round {t}/{}: searching {} exemplars", opt.rounds, pool.len());
        let (outcome, sims) = search_round(&mut pool, dataset, grader, embedder, config, t)?;
        let sims_path = out.join(format!("similarity_{}.bin", pool.round()));
        sims.write_binary(&sims_path).map_err(io(&sims_path))?;
        write_round(out, t, &pool, &outcome)?;
        let best = outcome.best_set().clone();
        log::info!(
            "round {t}: best validation accuracy {:.4} with {} exemplars",
            outcome.best_observation().accuracy,
            best.len()
        );
        if t < opt.rounds {
            let context: Vec<&Exemplar> = best.prompt_order(&pool).into_iter().map(|(_, e)| e).collect();
            let cap_seed: u64 = stream_rng(opt.seed, t, "cap").random();
            let (next, audit) = run_generation_phase(
                &dataset.train,
                &context,
                &pool,
                grader,
                t,
                t,
                cap_seed,
                config.word_budget,
            )?;
            save_pool(out, &next, &audit)?;
            pool = next;
        }
        state = RunState { completed_rounds: t, rounds: opt.rounds, last_best: Some(best) };
        write_json(&state_path, &state)?;
        if stop_after == Some(t) && t < opt.rounds {
            return Err(PipelineError::Interrupted { round: t });
        }
    }

    let best = state.last_best.clone().ok_or_else(|| PipelineError::Corrupt {
        path: state_path.clone(),
        message: "finished run without a selected set".into(),
    })?;
    best.check_against(&pool)?;
    let final_set = FrozenSet::new(grader.template(), &best, &pool);
    write_json(&out.join("final_set.json"), &final_set)?;

    let (method, test_predictions) = method_report("guide", &final_set.demos(), dataset, grader)?;
    write_jsonl(&out.join("predictions_test.jsonl"), &test_predictions)?;
    let mut report = RunReport::new(dataset.label_set, echo);
    report.methods.push(method);
    report.final_set = Some(serde_json::to_value(&final_set).expect("final set serializes"));
    write_report(out, &report)?;
    Ok(OptimizeOutcome { report, final_set, test_predictions })
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_text(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("report.txt"), &report.to_table())
}

pub fn read_report(path: &Path) -> Result<RunReport, PipelineError> {
    read_json(path)
}

/// Expert exemplars as authored; zero-shot when there are none.
pub fn naive_baseline<B: GraderBackend>(dataset: &Dataset, grader: &Grader<B>) -> Result<MethodReport, PipelineError> {
    let experts = dataset.expert_exemplars();
    let demos: Vec<&Exemplar> = experts.iter().collect();
    Ok(method_report("naive", &demos, dataset, grader)?.0)
}

/// Seeded uniform subset of `k` pool members, fixed for every query.
pub fn random_subset(pool: &ExemplarPool, k: usize, seed: u64) -> DemonstrationSet {
    let mut rng = stream_rng(seed, 0, "random-baseline");
    let k = k.min(pool.len());
    DemonstrationSet::new(index::sample(&mut rng, pool.len(), k).into_vec(), pool.round())
}

pub fn random_baseline<B: GraderBackend>(
    dataset: &Dataset,
    pool: &ExemplarPool,
    grader: &Grader<B>,
    k: usize,
    seed: u64,
) -> Result<MethodReport, PipelineError> {
    let set = random_subset(pool, k, seed);
    let demos: Vec<&Exemplar> = set.prompt_order(pool).into_iter().map(|(_, e)| e).collect();
    Ok(method_report("random", &demos, dataset, grader)?.0)
}

/// One input record for frozen-set grading. Only `response` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub id: Option<String>,
    pub response: Option<String>,
    pub label: Option<Label>,
}

/// Outcome of grading a batch of records.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeOutcome {
    pub predictions: Vec<Prediction>,
    pub schema_errors: usize,
    pub backend_failures: usize,
}

impl GradeOutcome {
    pub fn too_many_failures(&self) -> bool {
        self.backend_failures as f64 > MAX_FAILURE_FRACTION * self.predictions.len() as f64
    }
}

/// Grades raw JSONL lines with a frozen set. Malformed lines become
/// predictions carrying a schema error.
pub fn grade_lines<B: GraderBackend>(frozen: &FrozenSet, grader: &Grader<B>, lines: &[String]) -> GradeOutcome {
    let demos = frozen.demos();
    let template = grader.template();
    let labels = template.label_set;
    let predictions = grader.exec().map_range(lines.len(), |n| {
        let fallback_id = format!("line-{}", n + 1);
        let record: GradeRecord = match serde_json::from_str(&lines[n]) {
            Ok(r) => r,
            Err(e) => {
                return (true, false, Prediction {
                    id: fallback_id,
                    label: None,
                    predicted: None,
                    prompt_hash: String::new(),
                    error: Some(format!("schema: {e}")),
                })
            }
        };
        let id = record.id.clone().unwrap_or(fallback_id);
        let label = record.label.filter(|l| labels.contains(*l));
        let Some(response) = record.response else {
            return (true, false, Prediction {
                id,
                label,
                predicted: None,
                prompt_hash: String::new(),
                error: Some("schema: missing `response`".into()),
            });
        };
        let prompt = template.render(&demos, &response);
        let prompt_hash = sha256_hex(&[prompt.as_bytes()]);
        match grader.grade_prompt(&prompt) {
            Ok(p) => (false, false, Prediction { id, label, predicted: Some(p), prompt_hash, error: None }),
            Err(e) => (false, true, Prediction { id, label, predicted: None, prompt_hash, error: Some(e.to_string()) }),
        }
    });
    let schema_errors = predictions.iter().filter(|p| p.0).count();
    let backend_failures = predictions.iter().filter(|p| p.1).count();
    GradeOutcome { predictions: predictions.into_iter().map(|p| p.2).collect(), schema_errors, backend_failures }
}

/// Reads non-blank lines of a JSONL file.
pub fn read_lines(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

pub fn items_to_lines(items: &[Item]) -> Vec<String> {
    items.iter().map(|i| serde_json::to_string(i).expect("item serializes")).collect()
}
