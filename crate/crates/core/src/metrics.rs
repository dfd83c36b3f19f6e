//! Detection quality metrics: precision/recall/F1 at the timestep and
//! interval level, plus threshold-free ranking measures (area under the
//! ROC curve, average precision).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::AnomalyInterval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

fn prf_from_counts(counts: ConfusionCounts) -> PrfReport {
    let precision = if counts.tp + counts.fp == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let recall = if counts.tp + counts.fn_ == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfReport { precision, recall, f1, counts }
}

/// Timestep-level precision, recall and F1 of 0/1 predictions against 0/1
/// ground truth. Empty denominators score 0 rather than erroring.
pub fn point_prf(pred: &[u8], truth: &[u8]) -> Result<PrfReport> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no labels to score"));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(prf_from_counts(c))
}

/// Segment-adjusted predictions: if any timestep of a true anomalous
/// segment is predicted, the whole segment counts as predicted. Widely
/// used for event-style evaluation; predictions outside true segments are
/// left untouched.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut adjusted = pred.to_vec();
    let mut i = 0;
    while i < truth.len() {
        if truth[i] != 0 {
            let start = i;
            while i < truth.len() && truth[i] != 0 {
                i += 1;
            }
            if pred[start..i].iter().any(|&p| p != 0) {
                for a in adjusted[start..i].iter_mut() {
                    *a = 1;
                }
            }
        } else {
            i += 1;
        }
    }
    Ok(adjusted)
}

/// Interval-level precision/recall/F1: a predicted interval is a true
/// positive when it overlaps any ground-truth interval by at least one
/// timestep; a ground-truth interval is recalled when any prediction
/// overlaps it.
pub fn interval_prf(pred: &[AnomalyInterval], truth: &[AnomalyInterval]) -> PrfReport {
    let overlaps =
        |a: &AnomalyInterval, b: &AnomalyInterval| a.start <= b.end && b.start <= a.end;
    let tp = pred.iter().filter(|p| truth.iter().any(|t| overlaps(p, t))).count();
    let fp = pred.len() - tp;
    let recalled = truth.iter().filter(|t| pred.iter().any(|p| overlaps(p, t))).count();
    let fn_ = truth.len() - recalled;
    // precision counts matched predictions, recall counts recalled truths
    let precision = if pred.is_empty() { 0.0 } else { tp as f64 / pred.len() as f64 };
    let recall = if truth.is_empty() { 0.0 } else { recalled as f64 / truth.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfReport { precision, recall, f1, counts: ConfusionCounts { tp, fp, fn_, tn: 0 } }
}

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to rank"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve, computed as the normalized Mann-Whitney U
/// statistic with average ranks, so ties contribute exactly one half.
/// Errors with [`Error::DegenerateLabels`] when one class is missing.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scores_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average rank within each tie group (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: the area under the precision-recall curve as the
/// sum of precision-weighted recall increments over descending score
/// cuts, with tied scores entering as one group. Errors with
/// [`Error::DegenerateLabels`] when there is no positive label.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _neg) = check_scores_labels(scores, labels)?;
    if pos == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] != 0 {
                group_tp += 1;
            }
            j += 1;
        }
        let prev_recall = tp as f64 / pos as f64;
        tp += group_tp;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / j as f64;
        ap += (recall - prev_recall) * precision;
        i = j;
    }
    Ok(ap)
}
