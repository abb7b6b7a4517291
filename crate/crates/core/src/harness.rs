//! Deterministic synthetic grading environment.
//!
//! Synthetic item responses carry their latent vector in the text itself
//! (`[[z:v0,v1,...]]`), so the hash embedder recovers it exactly and the
//! simulated grader can run 1-nearest-neighbour classification over the
//! demonstrations it finds in a rendered prompt. Any other text is embedded as
//! a sum of per-token ±1 hash vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Item, DEFAULT_INSTRUCTION};
use crate::embedding::{cosine, EmbedError, EmbeddingProvider};
use crate::exec::Execution;
use crate::exemplar::{Label, LabelSet};
use crate::grader::{parse_grading_prompt, BackendError, GraderBackend, DEFAULT_TEMPERATURE};
use crate::rationale::parse_infill_prompt;

pub const DEFAULT_DIM: usize = 32;

const LATENT_OPEN: &str = "[[z:";
const LATENT_CLOSE: &str = "]]";
/// Weight of free-text tokens relative to an embedded latent vector.
const TEXT_WEIGHT: f64 = 0.25;
const TIE_EPS: f64 = 1e-12;

/// Renders a latent vector as item text. Coordinates use the shortest
/// representation that parses back to the same `f64`.
pub fn encode_latent(v: &[f64]) -> String {
    let coords: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("{LATENT_OPEN}{}{LATENT_CLOSE}", coords.join(","))
}

/// Splits `text` into the sum of its latent blocks and the remaining text.
fn split_latent(text: &str, dim: usize) -> (Option<Vec<f64>>, String) {
    let mut latent: Option<Vec<f64>> = None;
    let mut rest = String::new();
    let mut s = text;
    while let Some(open) = s.find(LATENT_OPEN) {
        let after = &s[open + LATENT_OPEN.len()..];
        let Some(close) = after.find(LATENT_CLOSE) else { break };
        let parsed: Result<Vec<f64>, _> = after[..close].split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == dim => {
                rest.push_str(&s[..open]);
                rest.push(' ');
                let acc = latent.get_or_insert_with(|| vec![0.0; dim]);
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
            _ => rest.push_str(&s[..open + LATENT_OPEN.len() + close + LATENT_CLOSE.len()]),
        }
        s = &after[close + LATENT_CLOSE.len()..];
    }
    rest.push_str(s);
    (latent, rest)
}

fn token_signs(token: &str, dim: usize, out: &mut [f64]) {
    let mut block = 0u32;
    let mut filled = 0;
    while filled < dim {
        let mut h = Sha256::new();
        h.update(token.as_bytes());
        h.update(block.to_le_bytes());
        let digest = h.finalize();
        for byte in digest.iter() {
            for bit in 0..8 {
                if filled == dim {
                    return;
                }
                out[filled] += if (byte >> bit) & 1 == 1 { 1.0 } else { -1.0 };
                filled += 1;
            }
        }
        block += 1;
    }
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Deterministic unit embedding of `text` in `dim` dimensions. Empty text maps
/// to the first basis vector.
pub fn synth_embed(text: &str, dim: usize) -> Vec<f64> {
    let (latent, rest) = split_latent(text, dim);
    let mut bag = vec![0.0; dim];
    for tok in rest.split_whitespace() {
        token_signs(tok, dim, &mut bag);
    }
    let latent = latent.and_then(unit);
    let bag = unit(bag);
    let combined = match (latent, bag) {
        (Some(l), Some(b)) => unit(l.iter().zip(&b).map(|(x, y)| x + TEXT_WEIGHT * y).collect()),
        (Some(l), None) => Some(l),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    };
    combined.unwrap_or_else(|| {
        let mut e0 = vec![0.0; dim];
        e0[0] = 1.0;
        e0
    })
}

/// 1-nearest-neighbour over demonstration responses; exact ties go to the
/// lower label and an empty context predicts label 0.
pub fn synth_grade(demos: &[(String, Label)], query: &str, dim: usize) -> Label {
    let q = synth_embed(query, dim);
    let vecs: Vec<(Vec<f64>, Label)> = demos.iter().map(|(r, l)| (synth_embed(r, dim), *l)).collect();
    nearest_label(&q, vecs.iter().map(|(v, l)| (v.as_slice(), *l))).unwrap_or(Label(0))
}

fn nearest_label<'a>(q: &[f64], demos: impl Iterator<Item = (&'a [f64], Label)>) -> Option<Label> {
    let mut best: Option<(f64, Label)> = None;
    for (v, l) in demos {
        let s = cosine(q, v).unwrap_or(f64::NEG_INFINITY);
        best = match best {
            None => Some((s, l)),
            Some((bs, _)) if s > bs + TIE_EPS => Some((s, l)),
            Some((bs, bl)) if (s - bs).abs() <= TIE_EPS && l < bl => Some((bs.max(s), l)),
            keep => keep,
        };
    }
    best.map(|(_, l)| l)
}

/// Hash embedder with no latent awareness beyond [`synth_embed`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, id: format!("synthetic-hash-d{dim}") }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(synth_embed(text, self.dim))
    }
}

/// Simulated grader and embedder. Grading prompts are answered by
/// [`synth_grade`]; rationale prompts get a templated rationale naming the
/// nearest context example.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    embedder: HashEmbedder,
    model: String,
}

impl SyntheticBackend {
    pub fn new(dim: usize) -> Self {
        Self { embedder: HashEmbedder::new(dim), model: format!("synthetic-1nn-d{dim}") }
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim
    }

    fn rationale(&self, demos: &[(String, Label)], response: &str, label: Label) -> String {
        let dim = self.dim();
        let q = synth_embed(response, dim);
        let nearest = demos
            .iter()
            .enumerate()
            .map(|(i, (r, l))| (i, *l, cosine(&q, &synth_embed(r, dim)).unwrap_or(-1.0)))
            .fold(None, |best: Option<(usize, Label, f64)>, cur| match best {
                Some(b) if b.2 >= cur.2 => Some(b),
                _ => Some(cur),
            });
        match nearest {
            Some((i, l, s)) => format!("label {label}: nearest concept {} (score {l}) at similarity {s:.3}", i + 1),
            None => format!("label {label}: no reference concept in context"),
        }
    }
}

impl EmbeddingProvider for SyntheticBackend {
    fn id(&self) -> &str {
        self.embedder.id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        self.embedder.embed(text)
    }
}

impl GraderBackend for SyntheticBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn temperature(&self) -> f64 {
        DEFAULT_TEMPERATURE
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        if let Some(p) = parse_infill_prompt(prompt) {
            return Ok(self.rationale(&p.demos, &p.response, p.label));
        }
        if let Some(p) = parse_grading_prompt(prompt) {
            let label = synth_grade(&p.demos, &p.query, self.dim());
            return Ok(format!("Closest reference example decides it.\nSCORE: {label}"));
        }
        Err(BackendError::Malformed("synthetic backend cannot interpret prompt".into()))
    }
}

/// Generator settings for a synthetic grading task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub labels: u32,
    pub items: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of item noise.
    pub noise: f64,
    /// Fraction of items placed between adjacent-label centroids.
    pub boundary_fraction: f64,
    /// Offset of each rubric cut from the midpoint between adjacent centroids.
    pub threshold_shift: f64,
    /// Train items per label that receive expert rationales.
    pub experts_per_label: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            labels: 3,
            items: 150,
            dim: DEFAULT_DIM,
            noise: 0.045,
            boundary_fraction: 0.4,
            threshold_shift: 0.12,
            experts_per_label: 0,
        }
    }
}

/// Everything needed to regenerate or inspect a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    /// Cut position along each adjacent-centroid segment, `a` to `a + 1`.
    pub thresholds: Vec<f64>,
    /// Ids of items generated near a cut.
    pub boundary_ids: Vec<String>,
}

impl SyntheticTask {
    pub fn centroid_response(&self, label: Label) -> String {
        encode_latent(&self.centroids[label.0 as usize])
    }
}

/// Splits `n` items 3:1:1 into (train, validation, test) counts.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let val = n / 5;
    (train, val, n - train - val)
}

fn rubric_stub(labels: LabelSet) -> String {
    let mut out = String::from("Score the response on how completely it demonstrates the target idea.\n");
    for l in labels.iter() {
        let desc = if l == labels.lowest() {
            "the idea is not demonstrated"
        } else if l == labels.highest() {
            "the idea is fully demonstrated"
        } else {
            "the idea is partially demonstrated"
        };
        out.push_str(&format!("{l}: {desc}\n"));
    }
    out
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).expect("valid sd");
    (0..dim).map(|_| n.sample(rng)).collect()
}

/// Builds a labeled task with ordinal cluster structure: centroid `l` lies
/// between basis directions `l` and `l + 1`, so adjacent labels are closer
/// than distant ones. Boundary items come in cross-label twin pairs straddling
/// a cut that is deliberately offset from the centroid midpoint.
pub fn generate_task(config: &TaskConfig, seed: u64) -> (Dataset, SyntheticTask) {
    assert!(config.labels >= 2, "need at least two labels");
    assert!(config.dim > config.labels as usize, "dimension must exceed label count");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.labels as usize;
    let dim = config.dim;

    // Orthonormal basis by Gram-Schmidt on Gaussian draws.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < k + 1 {
        let mut v = gaussian_vec(&mut rng, dim, 1.0);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if let Some(u) = unit(v) {
            basis.push(u);
        }
    }
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|l| unit(basis[l].iter().zip(&basis[l + 1]).map(|(a, b)| a + b).collect()).unwrap())
        .collect();
    let thresholds: Vec<f64> = (0..k - 1)
        .map(|_| if rng.random_bool(0.5) { 0.5 + config.threshold_shift } else { 0.5 - config.threshold_shift })
        .collect();

    let point = |rng: &mut ChaCha8Rng, base: &[f64]| -> Vec<f64> {
        let noise = gaussian_vec(rng, dim, config.noise);
        unit(base.iter().zip(&noise).map(|(a, b)| a + b).collect()).expect("non-degenerate point")
    };

    let n_boundary = ((config.items as f64 * config.boundary_fraction).round() as usize / 2) * 2;
    let n_boundary = if k < 2 { 0 } else { n_boundary.min(config.items) };
    let mut raw_items: Vec<(Vec<f64>, Label, bool)> = Vec::with_capacity(config.items);
    let offset = Uniform::new(0.02, 0.2).expect("valid range");
    for _ in 0..n_boundary / 2 {
        let seg = rng.random_range(0..k - 1);
        let theta = thresholds[seg];
        for (t, label) in [(theta - offset.sample(&mut rng), seg), (theta + offset.sample(&mut rng), seg + 1)] {
            let base: Vec<f64> =
                centroids[seg].iter().zip(&centroids[seg + 1]).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let v = point(&mut rng, &base);
            raw_items.push((v, Label(label as u32), true));
        }
    }
    for i in 0..config.items - n_boundary {
        let label = i % k;
        let v = point(&mut rng, &centroids[label]);
        raw_items.push((v, Label(label as u32), false));
    }
    // Fisher-Yates via rand's shuffle keeps this reproducible per seed.
    use rand::seq::SliceRandom;
    raw_items.shuffle(&mut rng);

    let mut items: Vec<Item> = Vec::with_capacity(raw_items.len());
    let mut boundary_ids = Vec::new();
    for (i, (v, label, boundary)) in raw_items.into_iter().enumerate() {
        let id = format!("s{i:04}");
        if boundary {
            boundary_ids.push(id.clone());
        }
        items.push(Item { id, response: encode_latent(&v), label, rationale: None, is_expert: false });
    }
    let (n_train, n_val, _) = split_sizes(items.len());
    let test = items.split_off(n_train + n_val);
    let validation = items.split_off(n_train);
    let mut train = items;

    if config.experts_per_label > 0 {
        let boundary: std::collections::HashSet<&str> = boundary_ids.iter().map(String::as_str).collect();
        for l in 0..config.labels {
            let mut picked = 0;
            for item in train.iter_mut() {
                if picked == config.experts_per_label {
                    break;
                }
                if item.label.0 == l && !boundary.contains(item.id.as_str()) {
                    item.is_expert = true;
                    item.rationale = Some(format!(
                        "Expert note: this response demonstrates rubric level {l} and lacks the features of other levels."
                    ));
                    picked += 1;
                }
            }
        }
    }

    let label_set = LabelSet::new(config.labels);
    let dataset = Dataset::new(
        train,
        validation,
        test,
        rubric_stub(label_set),
        DEFAULT_INSTRUCTION.to_owned(),
        label_set,
    )
    .expect("generated splits are valid");
    let task = SyntheticTask { config: config.clone(), seed, centroids, thresholds, boundary_ids };
    (dataset, task)
}

/// Validation accuracy of 1-NN grading for every `k`-subset of `pool`
/// responses, in lexicographic subset order. Independent of the prompt path.
pub fn exhaustive_subset_accuracies(
    pool: &[(String, Label)],
    queries: &[Item],
    k: usize,
    dim: usize,
    exec: Execution,
) -> Vec<(Vec<usize>, f64)> {
    use itertools::Itertools;
    let pool_vecs: Vec<Vec<f64>> = pool.iter().map(|(r, _)| synth_embed(r, dim)).collect();
    let query_vecs: Vec<Vec<f64>> = queries.iter().map(|q| synth_embed(&q.response, dim)).collect();
    let subsets: Vec<Vec<usize>> = (0..pool.len()).combinations(k).collect();
    let accs = exec.map(&subsets, |subset| {
        let correct = queries
            .iter()
            .zip(&query_vecs)
            .filter(|(item, q)| {
                nearest_label(q, subset.iter().map(|&i| (pool_vecs[i].as_slice(), pool[i].1))) == Some(item.label)
            })
            .count();
        correct as f64 / queries.len() as f64
    });
    subsets.into_iter().zip(accs).collect()
}

/// Two same-size subsets whose validation accuracies differ by at least
/// `min_gap`, found by exhaustive search (worst and best subset).
pub fn find_sensitive_pair(
    pool: &[(String, Label)],
    queries: &[Item],
    k: usize,
    dim: usize,
    min_gap: f64,
) -> Option<((Vec<usize>, f64), (Vec<usize>, f64))> {
    let all = exhaustive_subset_accuracies(pool, queries, k, dim, Execution::Parallel);
    let worst = all.iter().min_by(|a, b| a.1.total_cmp(&b.1))?.clone();
    let best = all.iter().max_by(|a, b| a.1.total_cmp(&b.1))?.clone();
    (best.1 - worst.1 >= min_gap).then_some((worst, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let a = synth_embed("the quick brown fox", 32);
        assert_eq!(a, synth_embed("the quick brown fox", 32));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let mut e0 = vec![0.0; 8];
        e0[0] = 1.0;
        assert_eq!(synth_embed("", 8), e0);
        assert_eq!(synth_embed("   ", 8), e0);
    }

    #[test]
    fn latent_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = l2_normalize(gaussian_vec(&mut rng, 32, 1.0)).unwrap();
        let text = encode_latent(&v);
        let recovered = synth_embed(&text, 32);
        for (a, b) in recovered.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distinct_sentences_do_not_collide() {
        let corpus = [
            "energy is conserved in the collision",
            "the charges repel because they are alike",
            "electrons move toward the positive plate",
            "the balloon sticks to the wall",
            "friction transfers electrons between materials",
            "abc",
            "abd",
        ];
        let vs: Vec<Vec<f64>> = corpus.iter().map(|t| synth_embed(t, 32)).collect();
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                assert!(cosine(&vs[i], &vs[j]).unwrap() < 1.0 - 1e-9, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn rationale_text_perturbs_but_preserves_latent_direction() {
        let task = generate_task(&TaskConfig::default(), 1).1;
        let resp = task.centroid_response(Label(1));
        let plain = synth_embed(&resp, 32);
        let with_rationale = synth_embed(&format!("{resp}\nlabel 1: nearest concept 2"), 32);
        let c = cosine(&plain, &with_rationale).unwrap();
        assert!(c < 1.0 && c > 0.95, "{c}");
    }

    #[test]
    fn grader_self_match_and_tie_break() {
        let demos = vec![("alpha beta".to_owned(), Label(2)), ("gamma".to_owned(), Label(1))];
        assert_eq!(synth_grade(&demos, "alpha beta", 32), Label(2));
        assert_eq!(synth_grade(&demos, "gamma", 32), Label(1));
        assert_eq!(synth_grade(&[], "anything", 32), Label(0));

        // Query at the exact midpoint of two orthogonal demos.
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0];
        let demos = vec![(encode_latent(&b), Label(1)), (encode_latent(&a), Label(0))];
        let mid = encode_latent(&[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(synth_grade(&demos, &mid, 4), Label(0));
    }

    #[test]
    fn removing_the_only_top_demo_flips_its_region() {
        // Brute force over a 6-item validation set.
        let (ds, task) = generate_task(&TaskConfig { boundary_fraction: 0.0, ..Default::default() }, 5);
        let demos: Vec<(String, Label)> =
            (0..3).map(|l| (task.centroid_response(Label(l)), Label(l))).collect();
        let val: Vec<&Item> = ds.validation.iter().take(6).collect();
        let before: Vec<Label> = val.iter().map(|i| synth_grade(&demos, &i.response, 32)).collect();
        let after: Vec<Label> = val.iter().map(|i| synth_grade(&demos[..2], &i.response, 32)).collect();
        for ((item, b), a) in val.iter().zip(&before).zip(&after) {
            if *b == Label(2) {
                assert_ne!(*a, Label(2));
            } else {
                assert_eq!(a, b, "item {} changed without being in the label-2 region", item.id);
            }
        }
        assert!(before.contains(&Label(2)));
        assert!(!after.contains(&Label(2)));
    }

    #[test]
    fn splits_follow_three_one_one() {
        assert_eq!(split_sizes(100), (60, 20, 20));
        let (ds, _) = generate_task(&TaskConfig { items: 100, ..Default::default() }, 9);
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (60, 20, 20));
    }

    #[test]
    fn centroid_demos_classify_clean_tasks() {
        let cfg = TaskConfig { boundary_fraction: 0.0, ..Default::default() };
        for seed in 0..5 {
            let (ds, task) = generate_task(&cfg, seed);
            let demos: Vec<(String, Label)> =
                (0..cfg.labels).map(|l| (task.centroid_response(Label(l)), Label(l))).collect();
            let correct = ds.validation.iter().filter(|i| synth_grade(&demos, &i.response, cfg.dim) == i.label).count();
            assert!(correct as f64 / ds.validation.len() as f64 >= 0.95, "seed {seed}: {correct}");
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = TaskConfig { experts_per_label: 2, ..Default::default() };
        let (a, ta) = generate_task(&cfg, 42);
        let (b, tb) = generate_task(&cfg, 42);
        assert_eq!(ta, tb);
        a.write_dir(dir_a.path()).unwrap();
        b.write_dir(dir_b.path()).unwrap();
        for f in ["train.jsonl", "validation.jsonl", "test.jsonl", "rubric.txt"] {
            assert_eq!(
                std::fs::read(dir_a.path().join(f)).unwrap(),
                std::fs::read(dir_b.path().join(f)).unwrap()
            );
        }
        assert_eq!(a.expert_items().count(), 6);
        assert_ne!(generate_task(&cfg, 43).0, a);
    }

    #[test]
    fn boundary_twins_are_similar_across_labels() {
        let (ds, task) = generate_task(&TaskConfig::default(), 11);
        let all: Vec<&Item> = ds.train.iter().chain(&ds.validation).chain(&ds.test).collect();
        let boundary: Vec<&Item> = all.iter().copied().filter(|i| task.boundary_ids.contains(&i.id)).collect();
        assert!(!boundary.is_empty());
        // Every boundary item has some cross-label, adjacent item above tau.
        for b in &boundary {
            let vb = synth_embed(&b.response, 32);
            let has_twin = all.iter().any(|o| {
                o.label.distance(b.label) == 1 && cosine(&vb, &synth_embed(&o.response, 32)).unwrap() >= 0.7
            });
            assert!(has_twin, "{}", b.id);
        }
    }

    #[test]
    fn boundary_heavy_task_is_sensitive_to_subset_choice() {
        let (ds, _) = generate_task(&TaskConfig { items: 50, boundary_fraction: 0.4, ..Default::default() }, 2);
        let pool: Vec<(String, Label)> = ds.train.iter().take(10).map(|i| (i.response.clone(), i.label)).collect();
        let (worst, best) = find_sensitive_pair(&pool, &ds.validation, 4, 32, 0.1).expect("sensitive pair");
        assert_eq!(worst.0.len(), best.0.len());
        assert!(best.1 - worst.1 >= 0.1);
    }

    #[test]
    fn backend_answers_both_prompt_kinds() {
        let b = SyntheticBackend::new(32);
        assert!(b.complete("hello").is_err());
    }
}
