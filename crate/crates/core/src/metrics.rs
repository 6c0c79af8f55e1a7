//! ROC-AUC, fold aggregation and the selective-prediction report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::{triage, Prediction};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("AUC is undefined: {0}")]
    UndefinedAuc(&'static str),
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {label} at index {index} is not binary")]
    NonBinaryLabel { index: usize, label: u8 },
    #[error("score at index {0} is NaN")]
    NanScore(usize),
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(i));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, l)| **l > 1) {
        return Err(MetricsError::NonBinaryLabel { index: i, label: l });
    }
    Ok(())
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half.
///
/// Runs in `O(n log n)`; the pair counts are kept as integers so the result
/// is exact.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc("both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // twice the U statistic
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Arithmetic mean and sample (n - 1) standard deviation.
pub fn fold_aggregate(fold_aucs: &[f64]) -> Result<(f64, f64), MetricsError> {
    let n = fold_aucs.len();
    if n < 2 {
        return Err(MetricsError::TooFewFolds(n));
    }
    let mean = fold_aucs.iter().sum::<f64>() / n as f64;
    let ss: f64 = fold_aucs.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

/// Accuracy of the accepted (low-uncertainty) and referred halves.
///
/// An empty partition has no accuracy; it serializes as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub n_low: usize,
    pub acc_low: Option<f64>,
    pub n_high: usize,
    pub acc_high: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub fold_aucs: Vec<f64>,
    pub fold_mean: Option<f64>,
    pub fold_std: Option<f64>,
    pub selective: SelectiveReport,
    pub threshold_used: f64,
}

/// Decision rule for accuracy: positive iff `prob_positive >= 0.5`.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn predicted_label(p: &Prediction) -> u8 {
    u8::from(p.prob_positive() >= DECISION_THRESHOLD)
}

pub fn selective_report(predictions: &[Prediction], labels: &[u8], threshold: f64) -> Result<SelectiveReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: predictions.len(),
            labels: labels.len(),
        });
    }
    let split = triage(predictions, threshold);
    let acc = |idx: &[usize]| {
        (!idx.is_empty()).then(|| {
            let hits = idx.iter().filter(|&&i| predicted_label(&predictions[i]) == labels[i]).count();
            hits as f64 / idx.len() as f64
        })
    };
    Ok(SelectiveReport {
        n_low: split.accepted.len(),
        acc_low: acc(&split.accepted),
        n_high: split.referred.len(),
        acc_high: acc(&split.referred),
    })
}

/// Per-example rows `file_name,score,label,uncertainty,partition`.
pub fn write_example_csv<W: Write>(
    out: W,
    names: &[String],
    predictions: &[Prediction],
    labels: &[u8],
    threshold: f64,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["file_name", "score", "label", "uncertainty", "partition"])?;
    for ((name, p), l) in names.iter().zip(predictions).zip(labels) {
        let part = if p.uncertainty <= threshold { "low" } else { "high" };
        w.write_record([
            name.as_str(),
            &p.prob_positive().to_string(),
            &l.to_string(),
            &p.uncertainty.to_string(),
            part,
        ])?;
    }
    w.flush()?;
    Ok(())
}
