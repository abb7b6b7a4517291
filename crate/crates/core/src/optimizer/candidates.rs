//! Candidate subsets around the incumbent: boundary-seeking insertions and
//! swaps, one-element flips, and uniform random draws.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{boundary_candidates, SimilarityMatrix};
use crate::exemplar::{DemonstrationSet, Label, SizeBounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    ContrastiveAdd,
    ContrastiveSwap,
    OneFlip,
    Random,
    ExpertAnchor,
    Initial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub set: DemonstrationSet,
    pub source: CandidateSource,
    /// For contrastive candidates: the incumbent member `i` and the inserted
    /// boundary partner `j`.
    pub pair: Option<(usize, usize)>,
}

/// Everything the generators need to know about the search space.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSpace<'a> {
    pub labels: &'a [Label],
    pub sims: &'a SimilarityMatrix,
    pub tau: f64,
    pub bounds: SizeBounds,
    pub candidate_count: usize,
    pub expert: Option<&'a DemonstrationSet>,
    pub pool_round: u32,
}

impl CandidateSpace<'_> {
    pub fn pool_len(&self) -> usize {
        self.labels.len()
    }

    /// Largest feasible subset size for this pool.
    pub fn max_size(&self) -> usize {
        self.bounds.max.min(self.pool_len())
    }

    pub fn random_subset<R: Rng + ?Sized>(&self, rng: &mut R) -> DemonstrationSet {
        let size = rng.random_range(self.bounds.min..=self.max_size());
        DemonstrationSet::new(index::sample(rng, self.pool_len(), size).into_vec(), self.pool_round)
    }
}

fn contrastive(best: &DemonstrationSet, space: &CandidateSpace) -> Vec<Candidate> {
    let mut out = Vec::new();
    for &i in best.indices() {
        for j in boundary_candidates(i, best, space.labels, space.sims, space.tau) {
            if best.len() < space.max_size() {
                out.push(Candidate {
                    set: best.with_added(j),
                    source: CandidateSource::ContrastiveAdd,
                    pair: Some((i, j)),
                });
            }
            out.push(Candidate {
                set: best.with_swapped(i, j),
                source: CandidateSource::ContrastiveSwap,
                pair: Some((i, j)),
            });
        }
    }
    out
}

fn one_flips<R: Rng + ?Sized>(best: &DemonstrationSet, space: &CandidateSpace, rng: &mut R) -> Vec<Candidate> {
    let can_add = best.len() < space.max_size();
    let can_remove = best.len() > space.bounds.min;
    let mut out: Vec<Candidate> = (0..space.pool_len())
        .filter_map(|e| match best.contains(e) {
            true if can_remove => Some(best.with_removed(e)),
            false if can_add => Some(best.with_added(e)),
            _ => None,
        })
        .map(|set| Candidate { set, source: CandidateSource::OneFlip, pair: None })
        .collect();
    out.shuffle(rng);
    out.truncate(space.candidate_count.div_ceil(2));
    out
}

fn random<R: Rng + ?Sized>(space: &CandidateSpace, rng: &mut R) -> Vec<Candidate> {
    (0..space.candidate_count)
        .map(|_| Candidate { set: space.random_subset(rng), source: CandidateSource::Random, pair: None })
        .collect()
}

/// Candidates around `best`, capped at `candidate_count`: contrastive
/// insertions and swaps first, then one-flips, then random subsets, with the
/// class that overflows the cap subsampled uniformly. Duplicates and subsets
/// in `observed` are dropped. The expert subset, when feasible and not yet
/// observed, is appended after the cap.
pub fn generate_candidates<R: Rng + ?Sized>(
    best: &DemonstrationSet,
    space: &CandidateSpace,
    observed: &BTreeSet<DemonstrationSet>,
    rng: &mut R,
) -> Vec<Candidate> {
    let classes = [contrastive(best, space), one_flips(best, space, rng), random(space, rng)];
    let mut seen: BTreeSet<DemonstrationSet> = observed.clone();
    let mut out: Vec<Candidate> = Vec::new();
    for class in classes {
        let fresh: Vec<Candidate> = class
            .into_iter()
            .filter(|c| space.bounds.contains(c.set.len()) && c.set.len() <= space.pool_len())
            .filter(|c| seen.insert(c.set.clone()))
            .collect();
        let room = space.candidate_count - out.len();
        if fresh.len() <= room {
            out.extend(fresh);
        } else {
            let mut keep = index::sample(rng, fresh.len(), room).into_vec();
            keep.sort_unstable();
            out.extend(keep.into_iter().map(|k| fresh[k].clone()));
        }
        if out.len() == space.candidate_count {
            break;
        }
    }
    if let Some(expert) = space.expert {
        if space.bounds.contains(expert.len()) && !observed.contains(expert) && !out.iter().any(|c| &c.set == expert) {
            out.push(Candidate { set: expert.clone(), source: CandidateSource::ExpertAnchor, pair: None });
        }
    }
    out
}
