//! Prompt assembly, grader backends, score parsing and validation-set
//! evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Item;
use crate::exec::Execution;
use crate::exemplar::{DemonstrationSet, Exemplar, ExemplarPool, Label, LabelSet};

/// Default sampling temperature for every grading and generation call.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

/// An evaluation fails outright when more than this fraction of items error.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

const REASK_SUFFIX: &str =
    "\n\nYour previous reply did not end with a valid score line. Reply with only the line `SCORE: <integer>`.";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("missing credentials: {0}")]
    Credentials(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GradeError {
    #[error("no score in model output: {0:?}")]
    UnparsableScore(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{failed} of {total} items failed to grade")]
    TooManyFailures { failed: usize, total: usize },
    #[error("nothing to evaluate")]
    EmptyItems,
}

/// A frozen text-completion model.
pub trait GraderBackend: Send + Sync {
    /// Identifies the model in cache keys and logs.
    fn model(&self) -> &str;
    fn temperature(&self) -> f64;
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

impl<B: GraderBackend + ?Sized> GraderBackend for &B {
    fn model(&self) -> &str {
        (**self).model()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

impl<B: GraderBackend + ?Sized> GraderBackend for Box<B> {
    fn model(&self) -> &str {
        (**self).model()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

/// Instruction and rubric shared by every prompt in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub rubric: String,
    pub label_set: LabelSet,
}

impl PromptTemplate {
    pub fn new(instruction: impl Into<String>, rubric: impl Into<String>, label_set: LabelSet) -> Self {
        Self { instruction: instruction.into(), rubric: rubric.into(), label_set }
    }

    pub fn from_dataset(ds: &crate::dataset::Dataset) -> Self {
        Self::new(ds.instruction.clone(), ds.rubric.clone(), ds.label_set)
    }

    fn header(&self) -> String {
        format!("{}\n\n<rubric>\n{}\n</rubric>\n\n", self.instruction.trim_end(), self.rubric.trim_end())
    }

    pub fn score_list(&self) -> String {
        self.label_set.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
    }

    /// Grading prompt with `demos` in the given order.
    pub fn render(&self, demos: &[&Exemplar], query: &str) -> String {
        let mut out = self.header();
        out.push_str(&render_demos(demos));
        out.push_str("Grade the following student response.\n<student_response>\n");
        out.push_str(query);
        out.push_str("\n</student_response>\n\n");
        out.push_str(&format!(
            "Possible scores: {}. Explain your reasoning briefly, then end with a line `SCORE: <integer>`.\n",
            self.score_list()
        ));
        out
    }

    /// Instruction, rubric and context block for a non-grading prompt.
    pub fn render_context(&self, demos: &[&Exemplar]) -> String {
        let mut out = self.header();
        out.push_str(&render_demos(demos));
        out
    }
}

/// Demonstration block: response, score and rationale per exemplar.
pub fn render_demos(demos: &[&Exemplar]) -> String {
    if demos.is_empty() {
        return "Scored examples: none.\n\n".to_owned();
    }
    let mut out = String::from("Scored examples:\n");
    for ex in demos {
        out.push_str(&format!(
            "<example>\n<response>\n{}\n</response>\n<score>{}</score>\n<rationale>\n{}\n</rationale>\n</example>\n",
            ex.response, ex.label, ex.rationale
        ));
    }
    out.push('\n');
    out
}

/// Recovers `(response, score)` pairs from a block written by
/// [`render_demos`].
pub fn parse_demos(text: &str) -> Vec<(String, Label)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<example>\n<response>\n") {
        rest = &rest[start + "<example>\n<response>\n".len()..];
        let Some(end) = rest.find("\n</response>\n<score>") else { break };
        let response = rest[..end].to_owned();
        rest = &rest[end + "\n</response>\n<score>".len()..];
        let Some(close) = rest.find("</score>") else { break };
        if let Ok(v) = rest[..close].trim().parse() {
            out.push((response, Label(v)));
        }
        rest = &rest[close..];
    }
    out
}

/// A grading prompt split back into its demonstrations and query.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedGradingPrompt {
    pub demos: Vec<(String, Label)>,
    pub query: String,
}

pub fn parse_grading_prompt(prompt: &str) -> Option<ParsedGradingPrompt> {
    let q_start = prompt.rfind("<student_response>\n")?;
    let body = &prompt[q_start + "<student_response>\n".len()..];
    let q_end = body.rfind("\n</student_response>")?;
    Some(ParsedGradingPrompt { demos: parse_demos(&prompt[..q_start]), query: body[..q_end].to_owned() })
}

/// Prompt for grading `query` with demonstration set `set`, demonstrations
/// ordered by label and then pool index.
pub fn render_prompt(template: &PromptTemplate, set: &DemonstrationSet, pool: &ExemplarPool, query: &str) -> String {
    let ordered = set.prompt_order(pool);
    let demos: Vec<&Exemplar> = ordered.iter().map(|(_, e)| *e).collect();
    template.render(&demos, query)
}

/// The integer after the last `SCORE:` marker, or failing that the last
/// standalone integer in the label set.
pub fn parse_score(raw: &str, labels: LabelSet) -> Result<Label, GradeError> {
    let upper = raw.to_ascii_uppercase();
    if let Some(pos) = upper.rfind("SCORE:") {
        let tail = raw[pos + "SCORE:".len()..].trim_start();
        let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(v) = digits.parse::<u32>() {
            if labels.contains(Label(v)) {
                return Ok(Label(v));
            }
        }
    }
    raw.split(|c: char| !c.is_ascii_alphanumeric() && c != '.' && c != '-')
        .map(|tok| tok.trim_end_matches('.'))
        .filter(|tok| !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit()))
        .filter_map(|tok| tok.parse::<u32>().ok())
        .map(Label)
        .filter(|l| labels.contains(*l))
        .next_back()
        .ok_or_else(|| GradeError::UnparsableScore(raw.chars().take(200).collect()))
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CachedCompletion {
    model: String,
    temperature: f64,
    output: String,
}

/// Completion cache keyed by SHA-256 of `(model, temperature, prompt)` plus an
/// optional salt. Backed by memory and, optionally, one file per key.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self { dir: None, memory: Mutex::new(HashMap::new()) }
    }

    pub fn on_disk(dir: PathBuf) -> std::io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), memory: Mutex::new(HashMap::new()) })
    }

    pub fn key(model: &str, temperature: f64, prompt: &str, salt: Option<&str>) -> String {
        let t = temperature.to_bits().to_le_bytes();
        match salt {
            Some(s) => sha256_hex(&[model.as_bytes(), &t, prompt.as_bytes(), s.as_bytes()]),
            None => sha256_hex(&[model.as_bytes(), &t, prompt.as_bytes()]),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let rec: CachedCompletion = serde_json::from_slice(&fs::read(path).ok()?).ok()?;
        self.memory.lock().unwrap().insert(key.to_owned(), rec.output.clone());
        Some(rec.output)
    }

    pub fn put(&self, key: &str, model: &str, temperature: f64, output: &str) {
        if let Some(dir) = &self.dir {
            let rec = CachedCompletion { model: model.to_owned(), temperature, output: output.to_owned() };
            let tmp = dir.join(format!("{key}.{}.tmp", std::process::id()));
            let done = dir.join(format!("{key}.json"));
            let bytes = serde_json::to_vec(&rec).expect("completion serializes");
            if fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, &done)).is_err() {
                log::warn!("could not persist cache entry {key}");
            }
        }
        self.memory.lock().unwrap().insert(key.to_owned(), output.to_owned());
    }
}

/// One graded item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub predicted: Option<Label>,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        self.label.is_some() && self.predicted == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
}

impl EvaluationResult {
    pub fn failures(&self) -> usize {
        self.predictions.iter().filter(|p| p.predicted.is_none()).count()
    }
}

/// A backend with its cache, prompt template and execution mode.
pub struct Grader<B> {
    backend: B,
    cache: ResponseCache,
    template: PromptTemplate,
    exec: Execution,
    calls: AtomicUsize,
}

impl<B: GraderBackend> Grader<B> {
    pub fn new(backend: B, cache: ResponseCache, template: PromptTemplate, exec: Execution) -> Self {
        Self { backend, cache, template, exec, calls: AtomicUsize::new(0) }
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn exec(&self) -> Execution {
        self.exec
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Completion through the cache. `salt` distinguishes otherwise identical
    /// prompts that must be sampled independently.
    pub fn complete(&self, prompt: &str, salt: Option<&str>) -> Result<String, BackendError> {
        let key = ResponseCache::key(self.backend.model(), self.backend.temperature(), prompt, salt);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.backend.complete(prompt)?;
        self.cache.put(&key, self.backend.model(), self.backend.temperature(), &out);
        Ok(out)
    }

    /// Grades one response, re-asking once if the score cannot be parsed.
    pub fn grade_prompt(&self, prompt: &str) -> Result<Label, GradeError> {
        let labels = self.template.label_set;
        let first = self.complete(prompt, None)?;
        match parse_score(&first, labels) {
            Ok(l) => Ok(l),
            Err(_) => {
                let retry = self.complete(&format!("{prompt}{REASK_SUFFIX}"), None)?;
                parse_score(&retry, labels)
            }
        }
    }

    pub fn grade_one(&self, set: &DemonstrationSet, pool: &ExemplarPool, query: &str) -> Result<Label, GradeError> {
        self.grade_prompt(&render_prompt(&self.template, set, pool, query))
    }

    /// Grades every item with `demos` in the given order. Per-item failures
    /// count as incorrect; more than 20% failures fails the evaluation.
    pub fn evaluate_demos(&self, demos: &[&Exemplar], items: &[Item]) -> Result<EvaluationResult, GradeError> {
        if items.is_empty() {
            return Err(GradeError::EmptyItems);
        }
        let predictions = self.exec.map(items, |item| {
            let prompt = self.template.render(demos, &item.response);
            let prompt_hash = sha256_hex(&[prompt.as_bytes()]);
            let (predicted, error) = match self.grade_prompt(&prompt) {
                Ok(l) => (Some(l), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Prediction { id: item.id.clone(), label: Some(item.label), predicted, prompt_hash, error }
        });
        let failed = predictions.iter().filter(|p| p.predicted.is_none()).count();
        if failed as f64 > MAX_FAILURE_FRACTION * items.len() as f64 {
            return Err(GradeError::TooManyFailures { failed, total: items.len() });
        }
        let correct = predictions.iter().filter(|p| p.is_correct()).count();
        Ok(EvaluationResult { accuracy: correct as f64 / items.len() as f64, predictions })
    }

    pub fn evaluate(
        &self,
        set: &DemonstrationSet,
        pool: &ExemplarPool,
        items: &[Item],
    ) -> Result<EvaluationResult, GradeError> {
        let ordered = set.prompt_order(pool);
        let demos: Vec<&Exemplar> = ordered.iter().map(|(_, e)| *e).collect();
        self.evaluate_demos(&demos, items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SyntheticBackend;

    fn template() -> PromptTemplate {
        PromptTemplate::new("Grade it.", "0 bad, 1 ok, 2 good", LabelSet::new(3))
    }

    fn ex(id: &str, resp: &str, label: u32) -> Exemplar {
        Exemplar::generated(id, resp, Label(label), &format!("why {id}"), 0)
    }

    #[test]
    fn parse_score_rules() {
        let ls = LabelSet::new(3);
        assert_eq!(parse_score("…reasoning… SCORE: 2", ls), Ok(Label(2)));
        assert_eq!(parse_score("The score is 1.", ls), Ok(Label(1)));
        assert!(matches!(parse_score("great answer!", ls), Err(GradeError::UnparsableScore(_))));
        // marker wins over later stray numbers only if valid
        assert_eq!(parse_score("score: 1 (of 2 possible 7)", ls), Ok(Label(1)));
        assert_eq!(parse_score("SCORE: 9 but really 2", ls), Ok(Label(2)));
        assert_eq!(parse_score("I'd give it 5, no, 0", ls), Ok(Label(0)));
        assert!(parse_score("between 1.5 and 3.2", ls).is_err());
    }

    #[test]
    fn prompt_is_deterministic_and_label_ordered() {
        let pool = ExemplarPool::new(vec![ex("a", "r a", 2), ex("b", "r b", 0), ex("c", "r c", 1)], 10, 0).unwrap();
        let set = DemonstrationSet::new(vec![0, 1, 2], 0);
        let p1 = render_prompt(&template(), &set, &pool, "query text");
        assert_eq!(p1, render_prompt(&template(), &set, &pool, "query text"));
        let parsed = parse_grading_prompt(&p1).unwrap();
        assert_eq!(
            parsed.demos,
            vec![("r b".to_owned(), Label(0)), ("r c".to_owned(), Label(1)), ("r a".to_owned(), Label(2))]
        );
        assert_eq!(parsed.query, "query text");
        assert!(p1.starts_with("Grade it."));
        assert!(p1.trim_end().ends_with("end with a line `SCORE: <integer>`."));
        assert!(p1.contains("<rationale>\nwhy b\n</rationale>"));
    }

    #[test]
    fn distinct_sets_render_distinct_prompts() {
        let pool = ExemplarPool::new(vec![ex("a", "x", 0), ex("b", "y", 0), ex("c", "z", 1)], 10, 0).unwrap();
        let a = render_prompt(&template(), &DemonstrationSet::new(vec![0, 2], 0), &pool, "q");
        let b = render_prompt(&template(), &DemonstrationSet::new(vec![1, 2], 0), &pool, "q");
        assert_ne!(a, b);
    }

    #[test]
    fn empty_demonstration_block_is_allowed() {
        let p = template().render(&[], "q");
        assert!(p.contains("Scored examples: none."));
        assert!(parse_grading_prompt(&p).unwrap().demos.is_empty());
    }

    struct Scripted {
        outputs: Vec<&'static str>,
        calls: AtomicUsize,
    }
    impl GraderBackend for Scripted {
        fn model(&self) -> &str {
            "scripted"
        }
        fn temperature(&self) -> f64 {
            0.2
        }
        fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.outputs[i % self.outputs.len()].to_owned())
        }
    }

    #[test]
    fn unparsable_reply_is_reasked_once() {
        let b = Scripted { outputs: vec!["hmm", "SCORE: 1"], calls: AtomicUsize::new(0) };
        let g = Grader::new(b, ResponseCache::in_memory(), template(), Execution::Sequential);
        assert_eq!(g.grade_prompt("p"), Ok(Label(1)));
        assert_eq!(g.backend_calls(), 2);
        let b = Scripted { outputs: vec!["hmm"], calls: AtomicUsize::new(0) };
        let g = Grader::new(b, ResponseCache::in_memory(), template(), Execution::Sequential);
        assert!(matches!(g.grade_prompt("p"), Err(GradeError::UnparsableScore(_))));
    }

    #[test]
    fn too_many_failures_fail_the_evaluation() {
        let items: Vec<Item> = (0..10).map(|i| Item::new(format!("v{i}"), format!("resp {i}"), 1)).collect();
        // "no" twice per item (first ask + reask) for 3 of 10 items → 30% failures
        let b = Scripted { outputs: vec!["SCORE: 1"], calls: AtomicUsize::new(0) };
        let g = Grader::new(b, ResponseCache::in_memory(), template(), Execution::Sequential);
        let r = g.evaluate_demos(&[], &items).unwrap();
        assert_eq!(r.accuracy, 1.0);

        struct Flaky;
        impl GraderBackend for Flaky {
            fn model(&self) -> &str {
                "flaky"
            }
            fn temperature(&self) -> f64 {
                0.2
            }
            fn complete(&self, prompt: &str) -> Result<String, BackendError> {
                if prompt.contains("resp 1\n") || prompt.contains("resp 2\n") || prompt.contains("resp 3\n") {
                    Err(BackendError::Transport("down".into()))
                } else {
                    Ok("SCORE: 0".into())
                }
            }
        }
        let g = Grader::new(Flaky, ResponseCache::in_memory(), template(), Execution::Sequential);
        assert_eq!(g.evaluate_demos(&[], &items), Err(GradeError::TooManyFailures { failed: 3, total: 10 }));
        let r = g.evaluate_demos(&[], &items[..6]).unwrap_err();
        assert_eq!(r, GradeError::TooManyFailures { failed: 3, total: 6 });
        let r = g.evaluate_demos(&[], &items[3..]).unwrap();
        assert_eq!(r.failures(), 1);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn accuracy_is_fraction_of_exact_matches() {
        // 8 of 10 items carry label 0, which Scripted always predicts.
        let items: Vec<Item> =
            (0..10).map(|i| Item::new(format!("v{i}"), format!("r{i}"), if i < 8 { 0 } else { 2 })).collect();
        let b = Scripted { outputs: vec!["SCORE: 0"], calls: AtomicUsize::new(0) };
        let g = Grader::new(b, ResponseCache::in_memory(), template(), Execution::Parallel);
        let r = g.evaluate_demos(&[], &items).unwrap();
        assert_eq!(r.accuracy, 0.8);
        assert_eq!(r.predictions.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn second_evaluation_is_served_from_cache() {
        let backend = SyntheticBackend::new(8);
        let pool = ExemplarPool::new(vec![ex("a", "alpha beta", 0), ex("b", "gamma delta", 1)], 10, 0).unwrap();
        let set = DemonstrationSet::new(vec![0, 1], 0);
        let items = vec![Item::new("v1", "alpha", 0), Item::new("v2", "delta", 1)];
        let g = Grader::new(&backend, ResponseCache::in_memory(), template(), Execution::Parallel);
        let first = g.evaluate(&set, &pool, &items).unwrap();
        let calls = g.backend_calls();
        assert_eq!(calls, 2);
        assert_eq!(g.evaluate(&set, &pool, &items).unwrap(), first);
        assert_eq!(g.backend_calls(), calls);
    }

    #[test]
    fn query_equal_to_a_demo_gets_its_label() {
        let backend = SyntheticBackend::new(16);
        let pool = ExemplarPool::new(vec![ex("a", "one two", 0), ex("b", "three four", 2)], 10, 0).unwrap();
        let g = Grader::new(&backend, ResponseCache::in_memory(), template(), Execution::Sequential);
        let set = DemonstrationSet::new(vec![0, 1], 0);
        assert_eq!(g.grade_one(&set, &pool, "three four"), Ok(Label(2)));
        assert_eq!(g.grade_one(&set, &pool, "one two"), Ok(Label(0)));
    }

    #[test]
    fn disk_cache_survives_restarts() {
        let dir = tempfile::tempdir().unwrap();
        let key = ResponseCache::key("m", 0.2, "prompt", None);
        assert_ne!(key, ResponseCache::key("m", 0.3, "prompt", None));
        assert_ne!(key, ResponseCache::key("m", 0.2, "prompt", Some("r1")));
        ResponseCache::on_disk(dir.path().into()).unwrap().put(&key, "m", 0.2, "SCORE: 1");
        assert_eq!(ResponseCache::on_disk(dir.path().into()).unwrap().get(&key).as_deref(), Some("SCORE: 1"));
    }
}
