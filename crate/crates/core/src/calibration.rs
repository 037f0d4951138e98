//! Token-level expected calibration error and ECE-derived ensemble weights.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::predictions::{argmax, validate_alignment, PredictionSet};
use crate::tokenize::TokenizedCorpus;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model_id: String,
    pub ece: f64,
    pub num_bins: usize,
    pub token_count: usize,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    /// ECE recomputed from the stored bins.
    pub fn ece_from_bins(&self) -> f64 {
        ece_from_bins(&self.bins, self.token_count)
    }
}

fn ece_from_bins(bins: &[CalibrationBin], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n as f64) * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Bin `b` covers `(b/B, (b+1)/B]`; a confidence of 0 joins bin 0.
pub fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let scaled = confidence * num_bins as f64;
    let mut b = (scaled.ceil() as usize).saturating_sub(1).min(num_bins - 1);
    // the product can land a hair off an exact boundary
    let edge = |k: usize| k as f64 / num_bins as f64;
    if b > 0 && confidence <= edge(b) {
        b -= 1;
    } else if b + 1 < num_bins && confidence > edge(b + 1) {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Default)]
struct BinAcc {
    count: usize,
    confidence: f64,
    correct: usize,
}

/// Binned ECE of one model against gold tags, with max-probability
/// confidence and argmax accuracy.
pub fn compute_ece(
    pred: &PredictionSet,
    gold: &TokenizedCorpus,
    num_bins: usize,
    exec: Execution,
) -> Result<CalibrationReport> {
    if num_bins == 0 {
        return Err(Error::Config("number of bins must be positive".into()));
    }
    if !gold.has_gold() {
        return Err(Error::Alignment("tokenized corpus carries no gold tags".into()));
    }
    let violations = validate_alignment(pred, gold);
    if let Some(v) = violations.first() {
        return Err(Error::Alignment(format!(
            "{} rows of {:?} do not align with the corpus, first: {v:?}",
            violations.len(),
            pred.model_id
        )));
    }
    if gold.token_count() == 0 {
        return Err(Error::EmptyInput("no tokens to calibrate"));
    }

    let per_doc = exec.map(&gold.docs, |doc| {
        let mut bins = vec![BinAcc::default(); num_bins];
        let tags = doc.tags.as_ref().expect("checked above");
        if let Some(rows) = pred.doc(&doc.doc_id).map(|d| &d.rows) {
            for (row, &tag) in rows.iter().zip(tags) {
                let confidence = row.probs.iter().cloned().fold(0.0, f64::max);
                let bin = &mut bins[bin_index(confidence, num_bins)];
                bin.count += 1;
                bin.confidence += confidence;
                bin.correct += usize::from(argmax(&row.probs) == tag);
            }
        }
        bins
    });

    let mut acc = vec![BinAcc::default(); num_bins];
    for doc_bins in per_doc {
        for (a, b) in acc.iter_mut().zip(doc_bins) {
            a.count += b.count;
            a.confidence += b.confidence;
            a.correct += b.correct;
        }
    }
    let token_count: usize = acc.iter().map(|b| b.count).sum();
    let bins: Vec<CalibrationBin> = acc
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (mean_confidence, accuracy) = if b.count == 0 {
                (0.0, 0.0)
            } else {
                (b.confidence / b.count as f64, b.correct as f64 / b.count as f64)
            };
            CalibrationBin {
                lower: i as f64 / num_bins as f64,
                upper: (i + 1) as f64 / num_bins as f64,
                count: b.count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport {
        model_id: pred.model_id.clone(),
        ece: ece_from_bins(&bins, token_count),
        num_bins,
        token_count,
        bins,
    })
}

/// Maps per-model ECE values to ensemble weights.
pub trait WeightRule {
    fn weights(&self, eces: &[f64]) -> Vec<f64>;
}

/// `w ∝ 1 / (ece + epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseEce {
    pub epsilon: f64,
}

impl Default for InverseEce {
    fn default() -> Self {
        InverseEce {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl WeightRule for InverseEce {
    fn weights(&self, eces: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = eces.iter().map(|e| 1.0 / (e + self.epsilon)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }
}

/// Ignores calibration entirely.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

impl WeightRule for Uniform {
    fn weights(&self, eces: &[f64]) -> Vec<f64> {
        vec![1.0 / eces.len() as f64; eces.len()]
    }
}

/// Per-model weights in member order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub entries: Vec<(String, f64)>,
}

impl WeightVector {
    pub fn get(&self, model_id: &str) -> Option<f64> {
        self.entries.iter().find(|(m, _)| m == model_id).map(|(_, w)| *w)
    }

    pub fn uniform<S: AsRef<str>>(model_ids: &[S]) -> Self {
        let w = 1.0 / model_ids.len() as f64;
        WeightVector {
            entries: model_ids.iter().map(|m| (m.as_ref().to_string(), w)).collect(),
        }
    }
}

pub fn ece_weights(reports: &[CalibrationReport], epsilon: f64) -> WeightVector {
    weights_with(reports, &InverseEce { epsilon })
}

pub fn weights_with(reports: &[CalibrationReport], rule: &dyn WeightRule) -> WeightVector {
    let eces: Vec<f64> = reports.iter().map(|r| r.ece).collect();
    WeightVector {
        entries: reports
            .iter()
            .map(|r| r.model_id.clone())
            .zip(rule.weights(&eces))
            .collect(),
    }
}

pub fn write_reports<W: Write>(reports: &[CalibrationReport], mut out: W) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports<R: BufRead>(input: R) -> Result<Vec<CalibrationReport>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let schema = |reason: String| Error::Schema { line: i + 1, reason };
        let line = line.map_err(|e| schema(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let report: CalibrationReport = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if !(0.0..=1.0).contains(&report.ece) {
            return Err(schema(format!("ece {} outside [0, 1]", report.ece)));
        }
        out.push(report);
    }
    Ok(out)
}

pub fn load_reports(path: &Path) -> Result<Vec<CalibrationReport>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_reports(BufReader::new(file))
}
