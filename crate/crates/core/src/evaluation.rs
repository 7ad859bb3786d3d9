//! Accuracy and fixed-alphabet macro-F1 on the overall and implicit slices,
//! error breakdowns, rationale ambiguity counts, and report serialization.
//!
//! Macro-F1 always averages over all three labels. A label that never
//! occurs in gold or predictions contributes an F1 of 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DatasetName, Polarity, Split};
use crate::rationale::Rationale;
use crate::training::{predict_many, Seq2SeqBackend, TrainError, TrainedModel};

pub const METRIC_CONVENTION: &str = "macro-F1 over the fixed alphabet {positive, negative, neutral}; a class absent from gold and predictions scores F1 = 0";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("predictions ({pred}) and gold labels ({gold}) differ in length")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("metrics need at least one example")]
    Empty,
}

fn check_lengths(pred: usize, gold: usize) -> Result<(), MetricError> {
    if pred != gold {
        return Err(MetricError::LengthMismatch { pred, gold });
    }
    if pred == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy(pred: &[Polarity], gold: &[Polarity]) -> Result<f64, MetricError> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean per-class F1 over the three labels.
///
/// Per-class F1 is `2·TP / (2·TP + FP + FN)`. The mean is formed over a
/// common integer denominator so that simple ratios come out exact.
pub fn macro_f1(pred: &[Polarity], gold: &[Polarity]) -> Result<f64, MetricError> {
    check_lengths(pred.len(), gold.len())?;
    let mut tp = [0u128; 3];
    let mut fp = [0u128; 3];
    let mut fn_ = [0u128; 3];
    for (p, g) in pred.iter().zip(gold) {
        if p == g {
            tp[p.index()] += 1;
        } else {
            fp[p.index()] += 1;
            fn_[g.index()] += 1;
        }
    }
    // Sum of n_c / d_c, with d_c = 1 for an absent class (n_c = 0).
    let mut num: u128 = 0;
    let mut den: u128 = 1;
    for c in 0..3 {
        let d = 2 * tp[c] + fp[c] + fn_[c];
        let (n_c, d_c) = if d == 0 { (0, 1) } else { (2 * tp[c], d) };
        num = num * d_c + n_c * den;
        den *= d_c;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    Ok(num as f64 / (3 * den) as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Explicitness {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCell {
    pub slice: Explicitness,
    pub gold_polarity: Polarity,
    pub count: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub total_errors: usize,
    /// Six cells: explicit then implicit, each over the three labels.
    pub cells: Vec<ErrorCell>,
}

impl ErrorBreakdown {
    pub fn cell(&self, slice: Explicitness, gold: Polarity) -> &ErrorCell {
        self.cells
            .iter()
            .find(|c| c.slice == slice && c.gold_polarity == gold)
            .expect("all six cells are present")
    }
}

/// Partitions misclassified examples by explicitness and gold label.
/// Ratios are cell counts over total errors (all zero when there are none).
pub fn error_breakdown(
    pred: &[Polarity],
    gold: &[Polarity],
    implicit: &[bool],
) -> Result<ErrorBreakdown, MetricError> {
    if pred.len() != gold.len() || gold.len() != implicit.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut counts = [[0usize; 3]; 2];
    for ((p, g), &imp) in pred.iter().zip(gold).zip(implicit) {
        if p != g {
            counts[imp as usize][g.index()] += 1;
        }
    }
    let total: usize = counts.iter().flatten().sum();
    let mut cells = Vec::with_capacity(6);
    for (row, slice) in [Explicitness::Explicit, Explicitness::Implicit].into_iter().enumerate() {
        for gold_polarity in Polarity::ALL {
            let count = counts[row][gold_polarity.index()];
            cells.push(ErrorCell {
                slice,
                gold_polarity,
                count,
                ratio: if total == 0 { 0.0 } else { count as f64 / total as f64 },
            });
        }
    }
    Ok(ErrorBreakdown {
        total_errors: total,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguityCounts {
    pub wrong_count: usize,
    pub ambiguous_count: usize,
    pub total: usize,
}

/// Counts rationales whose FCFS prediction misses gold (unparseable counts
/// as wrong) and rationales naming two or more distinct labels.
pub fn ambiguity_report(rationales: &[&Rationale], gold: &[Polarity]) -> Result<AmbiguityCounts, MetricError> {
    if rationales.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            pred: rationales.len(),
            gold: gold.len(),
        });
    }
    let mut counts = AmbiguityCounts {
        wrong_count: 0,
        ambiguous_count: 0,
        total: gold.len(),
    };
    for (r, g) in rationales.iter().zip(gold) {
        if r.resolved != Some(*g) {
            counts.wrong_count += 1;
        }
        if r.is_ambiguous() {
            counts.ambiguous_count += 1;
        }
    }
    Ok(counts)
}

/// Metrics on one slice. `accuracy` and `macro_f1` are absent when `n == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

impl SliceMetrics {
    fn compute(pred: &[Polarity], gold: &[Polarity]) -> Self {
        SliceMetrics {
            n: gold.len(),
            accuracy: accuracy(pred, gold).ok(),
            macro_f1: macro_f1(pred, gold).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slices {
    pub all: SliceMetrics,
    pub isa: SliceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub example_id: String,
    pub gold: Polarity,
    pub predicted: Polarity,
    pub implicit: bool,
    pub fallback: bool,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetName,
    pub metric_convention: String,
    pub slices: Slices,
    pub error_breakdown: ErrorBreakdown,
    pub ambiguity: Option<AmbiguityCounts>,
    /// Generations that named no label and were scored as `neutral`.
    pub fallback_count: usize,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset has no test examples")]
    EmptyTestSplit,
    #[error(transparent)]
    Inference(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Predicts every test example and scores the `all` and `isa` slices.
pub fn evaluate<B: Seq2SeqBackend>(model: &TrainedModel<B>, dataset: &Dataset) -> Result<EvalReport, EvalError> {
    let test = dataset.slice(Split::Test, false);
    if test.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let predictions = predict_many(model, &test)?;
    let rows: Vec<PredictionRow> = test
        .iter()
        .zip(predictions)
        .map(|(ex, p)| PredictionRow {
            example_id: ex.id.clone(),
            gold: ex.polarity,
            predicted: p.label,
            implicit: ex.implicit,
            fallback: p.fallback,
            raw: p.raw,
        })
        .collect();
    report_from_predictions(dataset.name(), rows)
}

pub fn report_from_predictions(dataset: DatasetName, rows: Vec<PredictionRow>) -> Result<EvalReport, EvalError> {
    let pred: Vec<Polarity> = rows.iter().map(|r| r.predicted).collect();
    let gold: Vec<Polarity> = rows.iter().map(|r| r.gold).collect();
    let implicit: Vec<bool> = rows.iter().map(|r| r.implicit).collect();
    let (isa_pred, isa_gold): (Vec<Polarity>, Vec<Polarity>) = rows
        .iter()
        .filter(|r| r.implicit)
        .map(|r| (r.predicted, r.gold))
        .unzip();
    Ok(EvalReport {
        dataset,
        metric_convention: METRIC_CONVENTION.into(),
        slices: Slices {
            all: SliceMetrics::compute(&pred, &gold),
            isa: SliceMetrics::compute(&isa_pred, &isa_gold),
        },
        error_breakdown: error_breakdown(&pred, &gold, &implicit)?,
        ambiguity: None,
        fallback_count: rows.iter().filter(|r| r.fallback).count(),
        predictions: rows,
    })
}

/// Which slice rows to emit in `results.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceSelection {
    #[default]
    Both,
    All,
    Isa,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// `dataset,slice,n,accuracy,macro_f1`.
    pub fn results_csv(&self, which: SliceSelection) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "slice", "n", "accuracy", "macro_f1"]).expect("in-memory write");
        let mut rows = Vec::new();
        if which != SliceSelection::Isa {
            rows.push(("all", &self.slices.all));
        }
        if which != SliceSelection::All {
            rows.push(("isa", &self.slices.isa));
        }
        for (name, m) in rows {
            w.write_record([
                self.dataset.to_string(),
                name.to_string(),
                m.n.to_string(),
                opt(m.accuracy),
                opt(m.macro_f1),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// `slice,gold_polarity,count,ratio`.
    pub fn errors_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["slice", "gold_polarity", "count", "ratio"]).expect("in-memory write");
        for c in &self.error_breakdown.cells {
            let slice = match c.slice {
                Explicitness::Explicit => "explicit",
                Explicitness::Implicit => "implicit",
            };
            w.write_record([slice, c.gold_polarity.as_str(), &c.count.to_string(), &c.ratio.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Writes `report.json`, `results.csv` and `errors.csv` into `dir`.
    pub fn write(&self, dir: &Path, which: SliceSelection) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("results.csv"), self.results_csv(which))?;
        std::fs::write(dir.join("errors.csv"), self.errors_csv())
    }
}
