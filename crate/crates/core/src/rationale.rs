//! Discriminative rationale generation by contrastive infill.
//!
//! Each rationale is generated teacher-forced: the model is told the correct
//! score and asked to explain why it applies and why the neighbouring scores
//! do not.

use serde::Serialize;

use crate::dataset::{Dataset, Item};
use crate::exemplar::{Exemplar, ExemplarPool, Label, LabelSet, PoolError};
use crate::grader::{parse_demos, sha256_hex, BackendError, Grader, GraderBackend, PromptTemplate, MAX_FAILURE_FRACTION};

pub const DEFAULT_WORD_BUDGET: usize = 120;

#[derive(Debug, thiserror::Error)]
pub enum RationaleError {
    #[error("{failed} of {total} rationale generations failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("label {0} is outside the label set")]
    LabelOutOfRange(Label),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

fn join_labels(labels: &[Label]) -> String {
    let names: Vec<String> = labels.iter().map(Label::to_string).collect();
    match names.len() {
        0 => String::new(),
        1 => names[0].clone(),
        n => format!("{} or {}", names[..n - 1].join(", "), names[n - 1]),
    }
}

/// Score-conditioned instruction naming the levels to exclude.
///
/// The lowest level asks what is missing for a higher score, the highest asks
/// what makes the response sufficient, and every level in between asks what
/// prevents the next lower score and what is missing for the next higher one.
pub fn score_instruction(label: Label, labels: LabelSet) -> String {
    let others: Vec<Label> = labels.iter().filter(|l| *l != label).collect();
    let head = format!("Explain why this deserves a {label} (not a {}).", join_labels(&others));
    if label == labels.lowest() {
        format!("{head} Specifically mention what is MISSING that would be needed for a higher score.")
    } else if label == labels.highest() {
        format!("{head} Specifically mention what makes this SUFFICIENT for the highest score.")
    } else {
        format!(
            "{head} Mention what PREVENTS it from being a {}, and what is MISSING for a {}.",
            Label(label.0 - 1),
            Label(label.0 + 1)
        )
    }
}

/// Inputs of one infill request.
#[derive(Debug, Clone)]
pub struct InfillPrompt<'a> {
    pub context: Vec<&'a Exemplar>,
    pub response: &'a str,
    pub label: Label,
    pub word_budget: usize,
}

impl InfillPrompt<'_> {
    pub fn render(&self, template: &PromptTemplate) -> String {
        let mut out = template.render_context(&self.context);
        out.push_str(&format!(
            "Write a grading rationale for the target response below. Its correct score is {}.\n",
            self.label
        ));
        out.push_str(&format!(
            "<target_response>\n{}\n</target_response>\n<target_score>{}</target_score>\n\n",
            self.response, self.label
        ));
        out.push_str(&score_instruction(self.label, template.label_set));
        out.push_str(&format!(
            "\nKeep the rationale under {} words and reply with the rationale text only.\n",
            self.word_budget
        ));
        out
    }
}

/// An infill prompt split back into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedInfillPrompt {
    pub demos: Vec<(String, Label)>,
    pub response: String,
    pub label: Label,
}

pub fn parse_infill_prompt(prompt: &str) -> Option<ParsedInfillPrompt> {
    const OPEN: &str = "<target_response>\n";
    const CLOSE: &str = "\n</target_response>\n<target_score>";
    let start = prompt.rfind(OPEN)?;
    let body = &prompt[start + OPEN.len()..];
    let end = body.rfind(CLOSE)?;
    let score_part = &body[end + CLOSE.len()..];
    let label = score_part[..score_part.find("</target_score>")?].trim().parse().ok().map(Label)?;
    Some(ParsedInfillPrompt { demos: parse_demos(&prompt[..start]), response: body[..end].to_owned(), label })
}

/// Templated stand-in used when generation keeps failing.
pub fn fallback_rationale(label: Label, labels: LabelSet) -> String {
    let others: Vec<Label> = labels.iter().filter(|l| *l != label).collect();
    format!("Meets rubric level {label}; does not meet rubric level {}.", join_labels(&others))
}

/// Audit record for one generated rationale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RationaleRecord {
    pub round: u32,
    pub item_id: String,
    pub label: Label,
    pub prompt_hash: String,
    pub rationale: String,
    pub fallback: bool,
}

/// Outcome of generating rationales for a batch of items.
#[derive(Debug, Clone)]
pub struct GeneratedBatch {
    pub exemplars: Vec<Exemplar>,
    pub audit: Vec<RationaleRecord>,
    pub failures: usize,
}

/// Generates one rationale per item with `context` as demonstrations,
/// retrying each failed item once before falling back to a template.
pub fn generate_batch<B: GraderBackend>(
    items: &[Item],
    context: &[&Exemplar],
    grader: &Grader<B>,
    round: u32,
    word_budget: usize,
) -> Result<GeneratedBatch, RationaleError> {
    let template = grader.template();
    for item in items {
        if !template.label_set.contains(item.label) {
            return Err(RationaleError::LabelOutOfRange(item.label));
        }
    }
    let salt = format!("round {round}");
    let results = grader.exec().map(items, |item| {
        let prompt = InfillPrompt { context: context.to_vec(), response: &item.response, label: item.label, word_budget }
            .render(template);
        let attempt = |s: &str| -> Result<String, BackendError> {
            let out = grader.complete(&prompt, Some(s))?;
            let out = out.trim().to_owned();
            if out.is_empty() {
                Err(BackendError::Malformed("empty rationale".into()))
            } else {
                Ok(out)
            }
        };
        let generated = attempt(&salt).or_else(|_| attempt(&format!("{salt} retry")));
        (sha256_hex(&[prompt.as_bytes()]), generated)
    });

    let mut batch = GeneratedBatch { exemplars: Vec::new(), audit: Vec::new(), failures: 0 };
    for (item, (prompt_hash, generated)) in items.iter().zip(results) {
        let (rationale, fallback) = match generated {
            Ok(r) => (r, false),
            Err(e) => {
                log::warn!("rationale for {} failed twice: {e}", item.id);
                batch.failures += 1;
                (fallback_rationale(item.label, template.label_set), true)
            }
        };
        let mut ex = Exemplar::generated(&item.id, &item.response, item.label, &rationale, round);
        ex.fallback = fallback;
        batch.audit.push(RationaleRecord {
            round,
            item_id: item.id.clone(),
            label: item.label,
            prompt_hash,
            rationale,
            fallback,
        });
        batch.exemplars.push(ex);
    }
    Ok(batch)
}

/// Initial pool: expert exemplars as authored, plus a generated rationale for
/// every other training item with the experts as context.
pub fn bootstrap_rationales<B: GraderBackend>(
    dataset: &Dataset,
    grader: &Grader<B>,
    capacity: usize,
    word_budget: usize,
) -> Result<(ExemplarPool, Vec<RationaleRecord>), RationaleError> {
    let experts = dataset.expert_exemplars();
    let context: Vec<&Exemplar> = experts.iter().collect();
    let rest: Vec<Item> = dataset.train.iter().filter(|i| !i.is_expert).cloned().collect();
    let batch = generate_batch(&rest, &context, grader, 0, word_budget)?;
    let mut members = experts.clone();
    members.extend(batch.exemplars);
    let pool = ExemplarPool::new(members, capacity, 0)?;
    if pool.len() > capacity {
        let seeded = ExemplarPool::new(experts, capacity, 0)?;
        let rest = pool.members().iter().filter(|e| !e.is_expert()).cloned().collect();
        return Ok((seeded.merge_and_cap(rest, 0)?, batch.audit));
    }
    Ok((pool, batch.audit))
}

/// Regenerates a rationale for every training item with `best` as context and
/// merges the batch into `pool`. The returned pool carries `next_round`.
pub fn run_generation_phase<B: GraderBackend>(
    train: &[Item],
    best: &[&Exemplar],
    pool: &ExemplarPool,
    grader: &Grader<B>,
    round: u32,
    next_round: u32,
    seed: u64,
    word_budget: usize,
) -> Result<(ExemplarPool, Vec<RationaleRecord>), RationaleError> {
    let batch = generate_batch(train, best, grader, round, word_budget)?;
    if batch.failures as f64 > MAX_FAILURE_FRACTION * train.len() as f64 {
        return Err(RationaleError::TooManyFailures { failed: batch.failures, total: train.len() });
    }
    let merged = pool.merge_and_cap(batch.exemplars, seed)?.with_round(next_round);
    Ok((merged, batch.audit))
}
