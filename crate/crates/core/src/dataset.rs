//! Train/validation/test splits and their JSONL representation.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exemplar::{Exemplar, Label, LabelSet};

pub const DEFAULT_INSTRUCTION: &str = "You are an experienced teacher grading short student responses. \
Apply the rubric strictly and assign exactly one score level.";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("item id {0} appears in more than one split")]
    OverlappingIds(String),
    #[error("expert item {0} has no rationale")]
    ExpertWithoutRationale(String),
    #[error("label {label} of item {id} is outside the label set 0..{count}")]
    LabelOutOfRange { id: String, label: u32, count: usize },
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
}

/// One line of a split file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub response: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_expert: bool,
}

impl Item {
    pub fn new(id: impl Into<String>, response: impl Into<String>, label: u32) -> Self {
        Self { id: id.into(), response: response.into(), label: Label(label), rationale: None, is_expert: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Item>,
    pub validation: Vec<Item>,
    pub test: Vec<Item>,
    pub rubric: String,
    pub instruction: String,
    pub label_set: LabelSet,
}

impl Dataset {
    /// Validates split disjointness, label range and expert rationales.
    pub fn new(
        train: Vec<Item>,
        validation: Vec<Item>,
        test: Vec<Item>,
        rubric: String,
        instruction: String,
        label_set: LabelSet,
    ) -> Result<Self, DatasetError> {
        let ds = Self { train, validation, test, rubric, instruction, label_set };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.train.is_empty() {
            return Err(DatasetError::EmptySplit("train"));
        }
        if self.validation.is_empty() {
            return Err(DatasetError::EmptySplit("validation"));
        }
        let mut ids = HashSet::new();
        for item in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !ids.insert(item.id.as_str()) {
                return Err(DatasetError::OverlappingIds(item.id.clone()));
            }
            if !self.label_set.contains(item.label) {
                return Err(DatasetError::LabelOutOfRange {
                    id: item.id.clone(),
                    label: item.label.0,
                    count: self.label_set.len(),
                });
            }
        }
        for item in self.train.iter().filter(|i| i.is_expert) {
            if item.rationale.as_deref().is_none_or(|r| r.trim().is_empty()) {
                return Err(DatasetError::ExpertWithoutRationale(item.id.clone()));
            }
        }
        Ok(())
    }

    pub fn expert_items(&self) -> impl Iterator<Item = &Item> {
        self.train.iter().filter(|i| i.is_expert)
    }

    pub fn expert_subset_ids(&self) -> Vec<&str> {
        self.expert_items().map(|i| i.id.as_str()).collect()
    }

    pub fn expert_exemplars(&self) -> Vec<Exemplar> {
        self.expert_items()
            .map(|i| Exemplar::expert(&i.id, &i.response, i.label, i.rationale.as_deref().unwrap_or_default()))
            .collect()
    }

    /// Loads `train.jsonl`, `validation.jsonl`, `test.jsonl`, `rubric.txt` and
    /// optionally `instruction.txt` from `dir`. The label set is inferred from
    /// the largest label seen unless `label_count` is given.
    pub fn load_dir(dir: &Path, label_count: Option<u32>) -> Result<Self, DatasetError> {
        let files = DatasetFiles::in_dir(dir);
        files.load(label_count)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("validation.jsonl"), &self.validation)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        let rubric = dir.join("rubric.txt");
        fs::write(&rubric, &self.rubric).map_err(|e| io_err(&rubric, e))?;
        let instr = dir.join("instruction.txt");
        fs::write(&instr, &self.instruction).map_err(|e| io_err(&instr, e))?;
        Ok(())
    }
}

/// Paths of the five dataset inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub train: std::path::PathBuf,
    pub validation: std::path::PathBuf,
    pub test: std::path::PathBuf,
    pub rubric: std::path::PathBuf,
    pub instruction: Option<std::path::PathBuf>,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        let instruction = dir.join("instruction.txt");
        Self {
            train: dir.join("train.jsonl"),
            validation: dir.join("validation.jsonl"),
            test: dir.join("test.jsonl"),
            rubric: dir.join("rubric.txt"),
            instruction: instruction.exists().then_some(instruction),
        }
    }

    pub fn load(&self, label_count: Option<u32>) -> Result<Dataset, DatasetError> {
        let train: Vec<Item> = read_jsonl(&self.train)?;
        let validation: Vec<Item> = read_jsonl(&self.validation)?;
        let test: Vec<Item> = read_jsonl(&self.test)?;
        for (line, item) in validation.iter().chain(&test).enumerate() {
            if item.is_expert {
                return Err(DatasetError::Record {
                    path: "validation/test".into(),
                    line: line + 1,
                    message: format!("item {} is marked expert outside the train split", item.id),
                });
            }
        }
        let rubric = fs::read_to_string(&self.rubric).map_err(|e| io_err(&self.rubric, e))?;
        let instruction = match &self.instruction {
            Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
            None => DEFAULT_INSTRUCTION.to_owned(),
        };
        let label_set = match label_count {
            Some(k) => LabelSet::new(k),
            None => LabelSet::covering(train.iter().chain(&validation).chain(&test).map(|i| i.label)),
        };
        Dataset::new(train, validation, test, rubric, instruction, label_set)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}
