//! Constrained Bayesian optimization over demonstration subsets.

mod candidates;
mod gp;
mod objective;
mod round;
mod select;

pub use candidates::{generate_candidates, Candidate, CandidateSource, CandidateSpace};
pub use gp::{expected_improvement, fit_surrogate, Surrogate, SurrogateError, NOISE_VARIANCE};
pub use objective::{sample_weights, scalarize, ObjectiveWeights};
pub use round::{run_round, RoundInputs, RoundOutcome, SubsetObservation};
pub use select::{select_final, selection_key};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exemplar::{PoolError, SizeBounds};
use crate::grader::GradeError;

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("pool of {pool} exemplars cannot hold a subset of {min}")]
    PoolTooSmall { pool: usize, min: usize },
    #[error("round produced no successful evaluation")]
    NoObservations,
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Grade(#[from] GradeError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub rounds: u32,
    pub n_eval: usize,
    pub n_init: usize,
    pub bounds: SizeBounds,
    pub tau: f64,
    pub candidate_count: usize,
    pub pool_capacity: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            n_eval: 32,
            n_init: 8,
            bounds: SizeBounds::default(),
            tau: crate::embedding::DEFAULT_TAU,
            candidate_count: 256,
            pool_capacity: 512,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::InvalidConfig(m.to_owned()));
        if self.rounds == 0 {
            return bad("at least one round is required");
        }
        if self.n_init == 0 || self.n_init >= self.n_eval {
            return bad("need 0 < n_init < n_eval");
        }
        if self.bounds.min == 0 || self.bounds.min > self.bounds.max || self.bounds.max > self.pool_capacity {
            return bad("need 1 <= k_min <= k_max <= pool capacity");
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [-1, 1]");
        }
        if self.candidate_count == 0 {
            return bad("candidate_count must be positive");
        }
        Ok(())
    }
}

/// Independent, reproducible random stream for one purpose within one round.
pub fn stream_rng(seed: u64, round: u32, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(round.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
