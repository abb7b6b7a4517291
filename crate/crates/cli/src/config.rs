//! Run configuration: TOML file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use guide_core::dataset::DatasetFiles;
use guide_core::llm::{HttpSettings, DEFAULT_API_KEY_VAR};
use guide_core::optimizer::OptimizerConfig;
use guide_core::pipeline::PipelineConfig;
use guide_core::Execution;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.jsonl`, `validation.jsonl`, `test.jsonl`, `rubric.txt`.
    pub dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub rubric: Option<PathBuf>,
    pub instruction: Option<PathBuf>,
    /// Number of score levels; inferred from the data when absent.
    pub labels: Option<u32>,
}

impl DataConfig {
    pub fn files(&self) -> Result<DatasetFiles> {
        let base = self.dir.as_deref().map(DatasetFiles::in_dir);
        let pick = |explicit: &Option<PathBuf>, from_dir: Option<PathBuf>, name: &str| -> Result<PathBuf> {
            explicit.clone().or(from_dir).with_context(|| format!("no {name} file: set data.dir or data.{name}"))
        };
        Ok(DatasetFiles {
            train: pick(&self.train, base.as_ref().map(|b| b.train.clone()), "train")?,
            validation: pick(&self.validation, base.as_ref().map(|b| b.validation.clone()), "validation")?,
            test: pick(&self.test, base.as_ref().map(|b| b.test.clone()), "test")?,
            rubric: pick(&self.rubric, base.as_ref().map(|b| b.rubric.clone()), "rubric")?,
            instruction: self.instruction.clone().or(base.and_then(|b| b.instruction)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model: String,
    pub embedding_model: String,
    pub base_url: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub api_key_env: String,
    /// Embedding dimension of the synthetic backend.
    pub synthetic_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let http = HttpSettings::default();
        Self {
            kind: BackendKind::Synthetic,
            model: http.model,
            embedding_model: "text-embedding-3-small".into(),
            base_url: http.base_url,
            temperature: http.temperature,
            timeout_secs: http.timeout_secs,
            max_retries: http.max_retries,
            api_key_env: DEFAULT_API_KEY_VAR.into(),
            synthetic_dim: guide_core::harness::DEFAULT_DIM,
        }
    }
}

impl BackendConfig {
    pub fn http_settings(&self, model: &str) -> HttpSettings {
        HttpSettings {
            base_url: self.base_url.clone(),
            model: model.to_owned(),
            temperature: self.temperature,
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            ..HttpSettings::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out: Option<PathBuf>,
    /// Completion cache; defaults to `<out>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub parallel: bool,
    pub threads: Option<usize>,
    pub word_budget: usize,
    pub random_k: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { out: None, cache_dir: None, parallel: true, threads: None, word_budget: p.word_budget, random_k: p.random_k }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub run: RunSection,
    pub optimizer: OptimizerConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn execution(&self) -> Execution {
        if self.run.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            optimizer: self.optimizer.clone(),
            word_budget: self.run.word_budget,
            random_k: self.run.random_k,
            execution: self.execution(),
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.run.out {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --out or set run.out"),
        }
    }

    pub fn cache_dir(&self) -> Result<PathBuf> {
        match &self.run.cache_dir {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("cache")),
        }
    }

    /// Settings that determine results. Paths, endpoints and parallelism
    /// are left out so runs on different machines compare equal.
    pub fn echo(&self) -> serde_json::Value {
        let b = &self.backend;
        let backend = match b.kind {
            BackendKind::Synthetic => json!({"kind": "synthetic", "dim": b.synthetic_dim}),
            BackendKind::Http => json!({
                "kind": "http",
                "model": b.model,
                "embedding_model": b.embedding_model,
                "temperature": b.temperature,
            }),
        };
        json!({
            "backend": backend,
            "labels": self.data.labels,
            "optimizer": self.optimizer,
            "word_budget": self.run.word_budget,
            "random_k": self.run.random_k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.rounds, 5);
        assert_eq!(c.optimizer.n_eval, 32);
        assert_eq!((c.optimizer.bounds.min, c.optimizer.bounds.max), (4, 16));
        assert_eq!(c.optimizer.tau, 0.7);
        assert_eq!(c.optimizer.candidate_count, 256);
        assert_eq!(c.optimizer.pool_capacity, 512);
        assert_eq!(c.backend.temperature, 0.2);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = toml::from_str("[optimizer]\nrounds = 2\n[backend]\nkind = \"http\"\n").unwrap();
        assert_eq!(c.optimizer.rounds, 2);
        assert_eq!(c.optimizer.n_eval, 32);
        assert_eq!(c.backend.kind, BackendKind::Http);
        assert!(toml::from_str::<RunConfig>("[run]\nrounds = 2\n").is_err());
    }

    #[test]
    fn echo_has_no_paths() {
        let mut c = RunConfig::default();
        c.run.out = Some("/tmp/a".into());
        c.data.dir = Some("/tmp/data".into());
        let mut d = c.clone();
        d.run.out = Some("/elsewhere".into());
        d.run.parallel = false;
        assert_eq!(c.echo(), d.echo());
        assert!(!c.echo().to_string().contains("/tmp"));
    }
}
