//! Grading-quality metrics and run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exemplar::{Label, LabelSet};
use crate::grader::Prediction;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    Empty,
    #[error("label {0} is outside a {1}-level confusion matrix")]
    LabelOutOfRange(Label, usize),
}

/// Counts of (true, predicted) pairs; rows are true labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "a confusion matrix needs at least two labels");
        Self { k, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let k = counts.len();
        assert!(k >= 2 && counts.iter().all(|r| r.len() == k), "counts must be a square matrix of size >= 2");
        Self { k, counts }
    }

    pub fn from_pairs(labels: LabelSet, pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<Self, MetricsError> {
        let mut cm = Self::new(labels.len());
        for (t, p) in pairs {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    /// Matrix of scored predictions. Items without a prediction or without a
    /// known label are left out.
    pub fn from_predictions(labels: LabelSet, predictions: &[Prediction]) -> Result<Self, MetricsError> {
        Self::from_pairs(labels, predictions.iter().filter_map(|p| Some((p.label?, p.predicted?))))
    }

    pub fn record(&mut self, truth: Label, predicted: Label) -> Result<(), MetricsError> {
        for l in [truth, predicted] {
            if l.0 as usize >= self.k {
                return Err(MetricsError::LabelOutOfRange(l, self.k));
            }
        }
        self.counts[truth.0 as usize][predicted.0 as usize] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Exact, off-by-one and off-by-more counts. For two labels every miss
    /// is adjacent.
    pub fn error_counts(&self) -> ErrorCounts {
        let mut c = ErrorCounts::default();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                match i.abs_diff(j) {
                    0 => c.exact += n,
                    1 => c.adjacent += n,
                    _ => c.non_adjacent += n,
                }
            }
        }
        c.total = c.exact + c.adjacent + c.non_adjacent;
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub exact: u64,
    pub adjacent: u64,
    pub non_adjacent: u64,
    pub total: u64,
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let c = cm.error_counts();
    if c.total == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(c.exact as f64 / c.total as f64)
}

/// Quadratic weighted kappa. `degenerate` marks a matrix whose chance
/// disagreement is zero (all mass in one diagonal cell); its value is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    pub degenerate: bool,
}

pub fn qwk(cm: &ConfusionMatrix) -> Result<Kappa, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let k = cm.k;
    let n = total as f64;
    let rows: Vec<f64> = cm.counts.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let cols: Vec<f64> = (0..k).map(|j| cm.counts.iter().map(|r| r[j]).sum::<u64>() as f64 / n).collect();
    let scale = ((k - 1) * (k - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = (i.abs_diff(j) * i.abs_diff(j)) as f64 / scale;
            observed += w * cm.counts[i][j] as f64 / n;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Ok(Kappa { value: 1.0, degenerate: true });
    }
    if observed == 0.0 {
        return Ok(Kappa { value: 1.0, degenerate: false });
    }
    Ok(Kappa { value: 1.0 - observed / expected, degenerate: false })
}

/// Fractions of off-by-one and off-by-more errors.
pub fn error_decomposition(cm: &ConfusionMatrix) -> Result<(f64, f64), MetricsError> {
    let c = cm.error_counts();
    if c.total == 0 {
        return Err(MetricsError::Empty);
    }
    let t = c.total as f64;
    Ok((c.adjacent as f64 / t, c.non_adjacent as f64 / t))
}

/// Metrics of one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub items: usize,
    /// Items the grader failed to score; excluded from the matrix.
    pub unscored: usize,
    pub accuracy: f64,
    pub qwk: f64,
    pub qwk_degenerate: bool,
    pub adj_err: f64,
    pub non_adj_err: f64,
    pub counts: ErrorCounts,
    pub confusion: ConfusionMatrix,
}

impl SplitMetrics {
    pub fn from_predictions(split: &str, labels: LabelSet, predictions: &[Prediction]) -> Result<Self, MetricsError> {
        let confusion = ConfusionMatrix::from_predictions(labels, predictions)?;
        let kappa = qwk(&confusion)?;
        let (adj_err, non_adj_err) = error_decomposition(&confusion)?;
        Ok(Self {
            split: split.to_owned(),
            items: predictions.len(),
            unscored: predictions.iter().filter(|p| p.predicted.is_none()).count(),
            accuracy: accuracy(&confusion)?,
            qwk: kappa.value,
            qwk_degenerate: kappa.degenerate,
            adj_err,
            non_adj_err,
            counts: confusion.error_counts(),
            confusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub splits: Vec<SplitMetrics>,
}

impl MethodReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }
}

/// Methods whose numbers come from outside this tool; rows are kept so
/// external results can be merged into the same table.
pub const EXTERNAL_BASELINES: [&str; 3] = ["knn-sbert", "vote-k", "bridge"];

const BINARY_NOTE: &str = "With two labels the quadratic weights equal the unweighted ones, so QWK is Cohen's kappa and every error is adjacent.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label_count: usize,
    pub methods: Vec<MethodReport>,
    /// Frozen demonstration set of the optimizing run, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_set: Option<serde_json::Value>,
    pub config: serde_json::Value,
    pub reserved_rows: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(labels: LabelSet, config: serde_json::Value) -> Self {
        let notes = if labels.len() == 2 { vec![BINARY_NOTE.to_owned()] } else { Vec::new() };
        Self {
            label_count: labels.len(),
            methods: Vec::new(),
            final_set: None,
            config,
            reserved_rows: EXTERNAL_BASELINES.iter().map(|s| s.to_string()).collect(),
            notes,
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Adds `other`'s methods, replacing rows with the same name.
    pub fn merge(&mut self, other: RunReport) {
        for m in other.methods {
            match self.methods.iter_mut().find(|x| x.method == m.method) {
                Some(slot) => *slot = m,
                None => self.methods.push(m),
            }
        }
        if self.final_set.is_none() {
            self.final_set = other.final_set;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned text table with one line per method and split.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 6]> = vec![[
            "Method".into(),
            "Split".into(),
            "Acc".into(),
            "QWK".into(),
            "AdjErr".into(),
            "NonAdjErr".into(),
        ]];
        for m in &self.methods {
            for s in &m.splits {
                rows.push([
                    m.method.clone(),
                    s.split.clone(),
                    format!("{:.4}", s.accuracy),
                    format!("{:.4}", s.qwk),
                    format!("{:.4}", s.adj_err),
                    format!("{:.4}", s.non_adj_err),
                ]);
            }
        }
        for r in &self.reserved_rows {
            if self.method(r).is_none() {
                rows.push([r.clone(), "-".into(), "-".into(), "-".into(), "-".into(), "-".into()]);
            }
        }
        let widths: Vec<usize> = (0..6).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (n, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, cell)| if c < 2 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if n == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * 5));
            }
        }
        for note in &self.notes {
            let _ = writeln!(out, "\n{note}");
        }
        out
    }
}
