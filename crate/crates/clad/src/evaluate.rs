//! Binary classification metrics and batched model evaluation.
//!
//! The positive class is "anomalous" (label 1). Precision, recall, and F1
//! use the standard definitions with zero-denominator cases reported as 0
//! and flagged as degenerate rather than NaN.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ByteBatch, ForwardRequest, ModelConfig, ModelParameters};

/// Counts of the four prediction/label outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Total number of classified samples.
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Tally predictions against labels (both 0/1). Errors if the slices
/// disagree in length.
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "prediction/label length mismatch: {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Input(format!("labels must be 0 or 1, got ({p}, {y})"))),
        }
    }
    Ok(c)
}

/// Precision, recall, and F1 for the positive class, plus a flag marking any
/// zero-denominator metric that was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

/// Compute precision/recall/F1 from a confusion tally.
pub fn prf1(c: &Confusion) -> Prf1 {
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 { precision, recall, f1, degenerate }
}

/// Arithmetic mean of per-class F1 scores.
pub fn macro_f1(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Full evaluation report for one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub samples: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl MetricsReport {
    /// Assemble a report from a confusion tally.
    pub fn from_confusion(dataset: &str, c: &Confusion) -> Self {
        let m = prf1(c);
        let total = c.total();
        let accuracy = if total == 0 { 0.0 } else { (c.tp + c.tn) as f64 / total as f64 };
        MetricsReport {
            dataset: dataset.to_string(),
            samples: total,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            degenerate: m.degenerate,
        }
    }
}

/// Class index with the largest logit; ties go to the lower index.
pub fn argmax_row(logits: &Array2<f64>, row: usize) -> u8 {
    if logits[[row, 1]] > logits[[row, 0]] {
        1
    } else {
        0
    }
}

/// Run the model over labeled streams in batches and predict by argmax.
pub fn predict_streams(
    config: &ModelConfig,
    params: &ModelParameters,
    streams: &[(&[u8], u8)],
    batch_size: usize,
) -> Result<Vec<u8>> {
    assert!(batch_size >= 1);
    let mut predictions = Vec::with_capacity(streams.len());
    for chunk in streams.chunks(batch_size) {
        let batch = ByteBatch::from_streams(chunk, config);
        let out = forward(config, params, &batch, ForwardRequest::eval_logits());
        let logits = out.logits.ok_or_else(|| Error::Train("evaluation produced no logits".into()))?;
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Train("non-finite logits during evaluation".into()));
        }
        for row in 0..chunk.len() {
            predictions.push(argmax_row(&logits, row));
        }
    }
    Ok(predictions)
}

/// Evaluate the model on labeled streams and report metrics.
pub fn evaluate_streams(
    dataset: &str,
    config: &ModelConfig,
    params: &ModelParameters,
    streams: &[(&[u8], u8)],
    batch_size: usize,
) -> Result<MetricsReport> {
    let predictions = predict_streams(config, params, streams, batch_size)?;
    let labels: Vec<u8> = streams.iter().map(|&(_, y)| y).collect();
    let c = confusion(&predictions, &labels)?;
    Ok(MetricsReport::from_confusion(dataset, &c))
}

/// Focal-only validation loss over labeled streams (no augmentation, no
/// dropout). Used for model selection during fine-tuning.
pub fn validation_focal_loss(
    config: &ModelConfig,
    params: &ModelParameters,
    streams: &[(&[u8], u8)],
    batch_size: usize,
    gamma: f64,
    label_smoothing: f64,
) -> Result<f64> {
    assert!(batch_size >= 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in streams.chunks(batch_size) {
        let batch = ByteBatch::from_streams(chunk, config);
        let out = forward(config, params, &batch, ForwardRequest::eval_logits());
        let logits = out.logits.ok_or_else(|| Error::Train("evaluation produced no logits".into()))?;
        let (loss, _) = crate::losses::focal_loss(&logits, &batch.labels, gamma, label_smoothing);
        if !loss.is_finite() {
            return Err(Error::Train("non-finite validation loss".into()));
        }
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::Config("validation set is empty".into()));
    }
    Ok(total / count as f64)
}
