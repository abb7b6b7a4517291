//! Few-shot exemplar selection for LLM grading.
//!
//! A pool of scored exemplars with rationales is searched for the
//! demonstration subset that grades a validation split best, using Bayesian
//! optimization with boundary-seeking candidate operators. Between search
//! rounds the rationales are regenerated with the best subset as context.

pub mod dataset;
pub mod embedding;
pub mod exec;
pub mod exemplar;
pub mod grader;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod rationale;

pub use dataset::{Dataset, Item};
pub use exemplar::{DemonstrationSet, Exemplar, ExemplarPool, Label, LabelSet, Origin, SizeBounds};
pub use exec::Execution;
