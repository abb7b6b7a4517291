//! One optimization round: random warm-up, then surrogate-guided search.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::candidates::{generate_candidates, CandidateSource, CandidateSpace};
use super::gp::{expected_improvement, fit_surrogate};
use super::objective::{sample_weights, scalarize, ObjectiveWeights};
use super::select::select_final;
use super::OptimizerError;
use crate::embedding::contrastive_score;
use crate::exemplar::DemonstrationSet;
use crate::grader::GradeError;

/// One evaluated subset. `objective` is `scalarize(accuracy, size,
/// contrastive, acc_star, weights)` with the values stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetObservation {
    pub ordinal: usize,
    pub subset: DemonstrationSet,
    pub accuracy: f64,
    pub size: usize,
    pub contrastive: f64,
    pub acc_star: f64,
    pub weights: ObjectiveWeights,
    pub objective: f64,
    /// Expected improvement when the subset was chosen by the acquisition.
    pub acquisition: Option<f64>,
    pub source: CandidateSource,
}

#[derive(Debug, Clone, Copy)]
pub struct RoundInputs<'a> {
    pub space: CandidateSpace<'a>,
    pub n_eval: usize,
    pub n_init: usize,
    /// Evaluate the expert subset up front, outside the budget.
    pub force_expert: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub history: Vec<SubsetObservation>,
    /// Position of the selected observation in `history`.
    pub best: usize,
    /// Evaluation wall time per observation, kept apart so that histories
    /// compare equal across runs.
    pub wall_seconds: Vec<f64>,
}

impl RoundOutcome {
    pub fn best_observation(&self) -> &SubsetObservation {
        &self.history[self.best]
    }

    pub fn best_set(&self) -> &DemonstrationSet {
        &self.history[self.best].subset
    }
}

struct Tracker<'a, F> {
    space: CandidateSpace<'a>,
    evaluate: F,
    history: Vec<SubsetObservation>,
    wall_seconds: Vec<f64>,
    observed: BTreeSet<DemonstrationSet>,
    acc_star: f64,
}

impl<F: FnMut(&DemonstrationSet) -> Result<f64, GradeError>> Tracker<'_, F> {
    fn observe(
        &mut self,
        subset: DemonstrationSet,
        source: CandidateSource,
        weights: ObjectiveWeights,
        acquisition: Option<f64>,
    ) -> Result<(), OptimizerError> {
        let started = Instant::now();
        let accuracy = (self.evaluate)(&subset)?;
        self.wall_seconds.push(started.elapsed().as_secs_f64());
        let contrastive = contrastive_score(subset.indices(), self.space.sims, self.space.labels, self.space.tau);
        let size = subset.len();
        let objective = scalarize(accuracy, size, contrastive, self.acc_star, weights);
        self.history.push(SubsetObservation {
            ordinal: self.history.len(),
            subset: subset.clone(),
            accuracy,
            size,
            contrastive,
            acc_star: self.acc_star,
            weights,
            objective,
            acquisition,
            source,
        });
        self.observed.insert(subset);
        self.acc_star = self.acc_star.max(accuracy);
        Ok(())
    }
}

/// Runs `n_eval` evaluations (plus the forced expert anchor, if any):
/// `n_init` random subsets, then one acquisition step per remaining
/// evaluation. Each step draws fresh objective weights, rescores the whole
/// history under them, fits the surrogate and evaluates the candidate with
/// the highest expected improvement. Stops early if the feasible space is
/// exhausted.
pub fn run_round<R, F>(inputs: &RoundInputs, rng: &mut R, evaluate: F) -> Result<RoundOutcome, OptimizerError>
where
    R: Rng + ?Sized,
    F: FnMut(&DemonstrationSet) -> Result<f64, GradeError>,
{
    let space = inputs.space;
    if space.pool_len() < space.bounds.min {
        return Err(OptimizerError::PoolTooSmall { pool: space.pool_len(), min: space.bounds.min });
    }
    let mut t = Tracker { space, evaluate, history: Vec::new(), wall_seconds: Vec::new(), observed: BTreeSet::new(), acc_star: 0.0 };

    let mut forced = 0;
    if let Some(expert) = space.expert.filter(|e| inputs.force_expert && space.bounds.contains(e.len())) {
        let w = sample_weights(rng);
        t.observe(expert.clone(), CandidateSource::ExpertAnchor, w, None)?;
        forced = 1;
    }

    let mut attempts = 0;
    let mut initial = 0;
    while initial < inputs.n_init && attempts < 100 * inputs.n_init {
        attempts += 1;
        let set = space.random_subset(rng);
        if t.observed.contains(&set) {
            continue;
        }
        let w = sample_weights(rng);
        t.observe(set, CandidateSource::Initial, w, None)?;
        initial += 1;
    }

    let length_scale = (space.bounds.max as f64).sqrt();
    while t.history.len() - forced < inputs.n_eval {
        let w = sample_weights(rng);
        let Some(best) = select_final(&t.history) else { break };
        let best = t.history[best].subset.clone();
        let candidates = generate_candidates(&best, &space, &t.observed, rng);
        if candidates.is_empty() {
            break;
        }
        let (pick, ei) = if t.history.len() < 2 {
            (0, None)
        } else {
            let targets: Vec<f64> =
                t.history.iter().map(|o| scalarize(o.accuracy, o.size, o.contrastive, t.acc_star, w)).collect();
            let g_plus = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let gp = fit_surrogate(&t.history, &targets, space.pool_len(), length_scale)?;
            let mut pick = (0, f64::NEG_INFINITY);
            for (k, c) in candidates.iter().enumerate() {
                let (mu, var) = gp.predict(&c.set.membership_vector(space.pool_len()));
                let ei = expected_improvement(mu, var.sqrt(), g_plus);
                if ei > pick.1 {
                    pick = (k, ei);
                }
            }
            (pick.0, Some(pick.1))
        };
        let chosen = &candidates[pick];
        t.observe(chosen.set.clone(), chosen.source, w, ei)?;
    }

    let best = select_final(&t.history).ok_or(OptimizerError::NoObservations)?;
    Ok(RoundOutcome { history: t.history, best, wall_seconds: t.wall_seconds })
}
