//! Exemplars, pools and demonstration subsets.
//!
//! A pool is an ordered, deduplicated collection of `(response, label,
//! rationale)` triplets. Pools are immutable snapshots: every round of
//! optimization works against one snapshot and demonstration sets refer to
//! members of that snapshot by index.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default maximum pool size.
pub const DEFAULT_POOL_CAPACITY: usize = 512;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PoolError {
    #[error("{experts} expert exemplars exceed the pool capacity of {capacity}")]
    TooManyExperts { experts: usize, capacity: usize },
    #[error("exemplar {id} has an empty rationale")]
    EmptyRationale { id: String },
    #[error("demonstration set references index {index} but the pool has {len} members")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("demonstration set was formed on pool round {set} but the pool is round {pool}")]
    RoundMismatch { set: u32, pool: u32 },
}

/// A score on a rubric. Label sets are contiguous integers starting at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl Label {
    pub fn value(self) -> u32 {
        self.0
    }

    /// Absolute distance between two score levels.
    pub fn distance(self, other: Label) -> u32 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The contiguous label set `{0, .., count - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    count: u32,
}

impl LabelSet {
    /// Panics if `count < 2`; a rubric with a single level cannot be graded.
    pub fn new(count: u32) -> Self {
        assert!(count >= 2, "a label set needs at least two levels");
        Self { count }
    }

    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, label: Label) -> bool {
        label.0 < self.count
    }

    pub fn lowest(&self) -> Label {
        Label(0)
    }

    pub fn highest(&self) -> Label {
        Label(self.count - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> {
        (0..self.count).map(Label)
    }

    /// Smallest label set containing every label in `labels`.
    pub fn covering(labels: impl IntoIterator<Item = Label>) -> Self {
        let max = labels.into_iter().map(|l| l.0).max().unwrap_or(0);
        Self::new((max + 1).max(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Expert,
    Generated { round: u32 },
}

impl Origin {
    pub fn is_expert(self) -> bool {
        matches!(self, Origin::Expert)
    }
}

/// A `(response, label, rationale)` triplet with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    /// Id of the training item the response came from.
    pub item_id: String,
    pub response: String,
    pub label: Label,
    pub rationale: String,
    pub origin: Origin,
    /// Set when the rationale is a templated stand-in after generation failed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(skip)]
    pub embedding: Option<Vec<f64>>,
}

impl Exemplar {
    pub fn expert(item_id: &str, response: &str, label: Label, rationale: &str) -> Self {
        Self {
            id: format!("{item_id}@expert"),
            item_id: item_id.to_owned(),
            response: response.to_owned(),
            label,
            rationale: rationale.to_owned(),
            origin: Origin::Expert,
            fallback: false,
            embedding: None,
        }
    }

    pub fn generated(item_id: &str, response: &str, label: Label, rationale: &str, round: u32) -> Self {
        Self {
            id: format!("{item_id}@r{round}"),
            item_id: item_id.to_owned(),
            response: response.to_owned(),
            label,
            rationale: rationale.to_owned(),
            origin: Origin::Generated { round },
            fallback: false,
            embedding: None,
        }
    }

    pub fn is_expert(&self) -> bool {
        self.origin.is_expert()
    }
}

/// Trim, collapse internal whitespace and casefold.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Key under which two exemplars count as duplicates.
pub fn dedup_key(ex: &Exemplar) -> String {
    format!(
        "{}\u{1f}{}\u{1f}{}",
        normalize_text(&ex.response),
        ex.label,
        normalize_text(&ex.rationale)
    )
}

/// A capped, deduplicated exemplar pool snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPool {
    members: Vec<Exemplar>,
    capacity: usize,
    round: u32,
}

impl ExemplarPool {
    /// Builds a pool from `members`, dropping later duplicates. Capping is not
    /// applied here; use [`ExemplarPool::merge_and_cap`] for that.
    pub fn new(members: Vec<Exemplar>, capacity: usize, round: u32) -> Result<Self, PoolError> {
        let mut pool = Self { members: Vec::new(), capacity, round };
        let mut seen = HashSet::new();
        for ex in members {
            if ex.rationale.trim().is_empty() {
                return Err(PoolError::EmptyRationale { id: ex.id });
            }
            if seen.insert(dedup_key(&ex)) {
                pool.members.push(ex);
            }
        }
        Ok(pool)
    }

    pub fn members(&self) -> &[Exemplar] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Exemplar] {
        &mut self.members
    }

    pub fn get(&self, index: usize) -> Option<&Exemplar> {
        self.members.get(index)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn labels(&self) -> Vec<Label> {
        self.members.iter().map(|e| e.label).collect()
    }

    /// Pool indices of expert-origin members, ascending.
    pub fn expert_indices(&self) -> Vec<usize> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_expert())
            .map(|(i, _)| i)
            .collect()
    }

    /// Union with `batch`, existing members winning over incoming duplicates,
    /// then capped to `capacity` by keeping every expert and sampling the
    /// remaining slots uniformly from generated members. Relative order of
    /// survivors is preserved.
    pub fn merge_and_cap(&self, batch: Vec<Exemplar>, seed: u64) -> Result<Self, PoolError> {
        let mut seen: HashSet<String> = self.members.iter().map(dedup_key).collect();
        let mut merged = self.members.clone();
        for ex in batch {
            if ex.rationale.trim().is_empty() {
                return Err(PoolError::EmptyRationale { id: ex.id });
            }
            if seen.insert(dedup_key(&ex)) {
                merged.push(ex);
            }
        }

        let experts = merged.iter().filter(|e| e.is_expert()).count();
        if experts > self.capacity {
            return Err(PoolError::TooManyExperts { experts, capacity: self.capacity });
        }
        if merged.len() > self.capacity {
            let generated: Vec<usize> = merged
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.is_expert())
                .map(|(i, _)| i)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep_count = self.capacity - experts;
            let mut keep = vec![false; merged.len()];
            for pos in index::sample(&mut rng, generated.len(), keep_count) {
                keep[generated[pos]] = true;
            }
            merged = merged
                .into_iter()
                .enumerate()
                .filter(|(i, e)| e.is_expert() || keep[*i])
                .map(|(_, e)| e)
                .collect();
        }
        Ok(Self { members: merged, capacity: self.capacity, round: self.round })
    }
}

/// Inclusive bounds on demonstration set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBounds {
    pub min: usize,
    pub max: usize,
}

impl SizeBounds {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, size: usize) -> bool {
        (self.min..=self.max).contains(&size)
    }
}

impl Default for SizeBounds {
    fn default() -> Self {
        Self { min: 4, max: 16 }
    }
}

/// A set of pool indices forming one few-shot context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DemonstrationSet {
    members: Vec<usize>,
    pool_round: u32,
}

impl DemonstrationSet {
    /// Sorts and deduplicates `indices`.
    pub fn new(mut indices: Vec<usize>, pool_round: u32) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { members: indices, pool_round }
    }

    pub fn empty(pool_round: u32) -> Self {
        Self { members: Vec::new(), pool_round }
    }

    pub fn indices(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn pool_round(&self) -> u32 {
        self.pool_round
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }

    pub fn with_added(&self, index: usize) -> Self {
        let mut m = self.members.clone();
        m.push(index);
        Self::new(m, self.pool_round)
    }

    pub fn with_removed(&self, index: usize) -> Self {
        Self {
            members: self.members.iter().copied().filter(|&i| i != index).collect(),
            pool_round: self.pool_round,
        }
    }

    pub fn with_swapped(&self, out: usize, inn: usize) -> Self {
        self.with_removed(out).with_added(inn)
    }

    /// Binary membership vector over a pool of `pool_len` members.
    pub fn membership_vector(&self, pool_len: usize) -> Vec<f64> {
        let mut v = vec![0.0; pool_len];
        for &i in &self.members {
            v[i] = 1.0;
        }
        v
    }

    pub fn check_against(&self, pool: &ExemplarPool) -> Result<(), PoolError> {
        if self.pool_round != pool.round() {
            return Err(PoolError::RoundMismatch { set: self.pool_round, pool: pool.round() });
        }
        match self.members.last() {
            Some(&i) if i >= pool.len() => Err(PoolError::IndexOutOfRange { index: i, len: pool.len() }),
            _ => Ok(()),
        }
    }

    /// Members in prompt order: label ascending, then pool index ascending.
    pub fn prompt_order<'p>(&self, pool: &'p ExemplarPool) -> Vec<(usize, &'p Exemplar)> {
        let mut out: Vec<_> = self.members.iter().map(|&i| (i, &pool.members()[i])).collect();
        out.sort_by_key(|(i, e)| (e.label, *i));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(id: &str, resp: &str, label: u32, rat: &str) -> Exemplar {
        Exemplar::generated(id, resp, Label(label), rat, 0)
    }

    #[test]
    fn dedup_key_normalizes_whitespace_and_case() {
        let a = gen("a", "A  cat", 1, "ok");
        let b = gen("b", "a cat", 1, "OK ");
        assert_eq!(dedup_key(&a), dedup_key(&b));
    }

    #[test]
    fn dedup_key_separates_labels_and_rationales() {
        assert_ne!(dedup_key(&gen("a", "cat", 1, "ok")), dedup_key(&gen("a", "cat", 2, "ok")));
        assert_ne!(
            dedup_key(&gen("a", "cat", 1, "because X")),
            dedup_key(&gen("a", "cat", 1, "because Y"))
        );
    }

    fn pool_with(experts: usize, generated: usize, cap: usize) -> ExemplarPool {
        let mut m = Vec::new();
        for i in 0..experts {
            m.push(Exemplar::expert(&format!("e{i}"), &format!("expert answer {i}"), Label(0), "expert"));
        }
        for i in 0..generated {
            m.push(gen(&format!("g{i}"), &format!("answer {i}"), 1, "gen"));
        }
        ExemplarPool::new(m, cap, 0).unwrap()
    }

    #[test]
    fn cap_keeps_experts_and_fills_to_capacity() {
        let pool = pool_with(12, 488, 512);
        let batch: Vec<_> = (0..100).map(|i| gen(&format!("n{i}"), &format!("new {i}"), 2, "r")).collect();
        let out = pool.merge_and_cap(batch, 7).unwrap();
        assert_eq!(out.len(), 512);
        assert_eq!(out.expert_indices().len(), 12);
    }

    #[test]
    fn merging_duplicates_is_a_no_op() {
        let pool = pool_with(2, 20, 512);
        let out = pool.merge_and_cap(pool.members().to_vec(), 1).unwrap();
        assert_eq!(out, pool);
    }

    #[test]
    fn existing_member_wins_over_incoming_duplicate() {
        let pool = ExemplarPool::new(vec![Exemplar::expert("x", "Cat", Label(1), "ok")], 10, 0).unwrap();
        let out = pool.merge_and_cap(vec![gen("x", "cat ", 1, "OK")], 0).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out.members()[0].is_expert());
    }

    #[test]
    fn too_many_experts_is_an_error() {
        let pool = pool_with(5, 0, 10);
        let batch: Vec<_> = (0..6)
            .map(|i| Exemplar::expert(&format!("z{i}"), &format!("z{i}"), Label(0), "r"))
            .collect();
        assert_eq!(
            pool.merge_and_cap(batch, 0).unwrap_err(),
            PoolError::TooManyExperts { experts: 11, capacity: 10 }
        );
    }

    #[test]
    fn empty_rationale_rejected() {
        let pool = pool_with(0, 1, 10);
        assert!(matches!(
            pool.merge_and_cap(vec![gen("q", "q", 0, "  ")], 0),
            Err(PoolError::EmptyRationale { .. })
        ));
    }

    #[test]
    fn capping_samples_each_generated_member_uniformly() {
        // 3 experts + 1000 generated capped at 512: each generated member
        // should survive with probability 509/1000.
        let base = pool_with(3, 0, 512);
        let batch: Vec<_> = (0..1000).map(|i| gen(&format!("g{i}"), &format!("a{i}"), 1, "r")).collect();
        let reps = 1000;
        let mut hits = vec![0u32; 1000];
        for seed in 0..reps {
            let out = base.merge_and_cap(batch.clone(), seed).unwrap();
            assert_eq!(out.len(), 512);
            assert_eq!(out.expert_indices(), vec![0, 1, 2]);
            for ex in &out.members()[3..] {
                let i: usize = ex.item_id[1..].parse().unwrap();
                hits[i] += 1;
            }
        }
        let p = 509.0 / 1000.0;
        let expected = reps as f64 * p;
        // chi-square over survive/drop per member, summed: df ~ 1000, mean 1000.
        let chi2: f64 = hits
            .iter()
            .map(|&h| {
                let h = h as f64;
                let miss = reps as f64 - h;
                let exp_miss = reps as f64 * (1.0 - p);
                (h - expected).powi(2) / expected + (miss - exp_miss).powi(2) / exp_miss
            })
            .sum();
        // sd of chi2 with df=1000 is ~45; allow 5 sd.
        assert!(chi2 < 1000.0 + 5.0 * 44.7, "chi2 = {chi2}");
        assert!(hits.iter().all(|&h| h > 400 && h < 620));
    }

    #[test]
    fn prompt_order_is_label_then_index() {
        let m = vec![gen("a", "a", 2, "r"), gen("b", "b", 0, "r"), gen("c", "c", 1, "r")];
        let pool = ExemplarPool::new(m, 10, 0).unwrap();
        let set = DemonstrationSet::new(vec![0, 1, 2], 0);
        let order: Vec<u32> = set.prompt_order(&pool).iter().map(|(_, e)| e.label.0).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn demonstration_set_checks() {
        let pool = pool_with(0, 3, 10);
        assert!(DemonstrationSet::new(vec![0, 2], 0).check_against(&pool).is_ok());
        assert!(DemonstrationSet::new(vec![3], 0).check_against(&pool).is_err());
        assert!(DemonstrationSet::new(vec![0], 1).check_against(&pool).is_err());
        let s = DemonstrationSet::new(vec![3, 1, 1], 0);
        assert_eq!(s.indices(), &[1, 3]);
        assert_eq!(s.with_swapped(1, 0).indices(), &[0, 3]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_exemplar() -> impl Strategy<Value = Exemplar> {
            ("[a-c ]{1,6}", 0u32..3, "[xy ]{1,4}", any::<bool>()).prop_filter_map(
                "non-blank rationale",
                |(resp, label, rat, expert)| {
                    if rat.trim().is_empty() {
                        return None;
                    }
                    let mut e = gen("i", &resp, label, &rat);
                    if expert {
                        e.origin = Origin::Expert;
                    }
                    Some(e)
                },
            )
        }

        proptest! {
            #[test]
            fn merge_is_idempotent_and_respects_invariants(
                base in prop::collection::vec(arb_exemplar(), 0..30),
                batch in prop::collection::vec(arb_exemplar(), 0..30),
                seed in any::<u64>(),
            ) {
                let base: Vec<_> = base.into_iter().map(|mut e| { e.origin = Origin::Generated { round: 0 }; e }).collect();
                let pool = ExemplarPool::new(base, 12, 0).unwrap();
                let experts = batch.iter().filter(|e| e.is_expert()).count();
                match pool.merge_and_cap(batch, seed) {
                    Ok(out) => {
                        prop_assert!(out.len() <= 12);
                        let keys: HashSet<_> = out.members().iter().map(dedup_key).collect();
                        prop_assert_eq!(keys.len(), out.len());
                        let again = out.merge_and_cap(out.members().to_vec(), seed).unwrap();
                        prop_assert_eq!(&again, &out);
                        for e in pool.members().iter().filter(|e| e.is_expert()) {
                            prop_assert!(out.members().contains(e));
                        }
                    }
                    Err(PoolError::TooManyExperts { .. }) => prop_assert!(experts > 12),
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
            }

            #[test]
            fn dedup_never_merges_distinct_responses(a in "[a-z ]{1,8}", b in "[a-z ]{1,8}") {
                let ea = gen("a", &a, 1, "r");
                let eb = gen("b", &b, 1, "r");
                if normalize_text(&a) != normalize_text(&b) {
                    prop_assert_ne!(dedup_key(&ea), dedup_key(&eb));
                }
            }
        }
    }
}
