//! Binary classification metrics and fold-aggregate confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric undefined on empty input")]
    Empty,
    #[error("AUROC needs both classes, found only label {0}")]
    SingleClass(u8),
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("confidence interval needs at least two values")]
    TooFewValues,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    Ok(())
}

/// Area under the ROC curve in its Mann-Whitney form: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted one half.
/// Computed with tie-averaged ranks in O(n log n).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(MetricError::SingleClass(0));
    }
    if n_neg == 0 {
        return Err(MetricError::SingleClass(1));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged across the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: mean over positives of the precision at that
/// positive's rank, with scores sorted descending. Ties keep their
/// original input order (stable sort), so among equal scores the
/// earlier element ranks higher; callers comparing runs should fix
/// their input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            tp += 1;
            sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// F1 of the positive class with predictions `score >= threshold`.
/// Returns 0 when precision and recall are both zero.
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64, MetricError> {
    check_inputs(scores, labels)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, l) {
            (true, 1) => tp += 1,
            (true, _) => fp += 1,
            (false, 1) => fn_ += 1,
            (false, _) => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Mean with a 95% Student-t confidence interval over k fold values
/// (k - 1 degrees of freedom, sample standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn mean_ci95(values: &[f64]) -> Result<Ci, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    if values.len() < 2 {
        return Err(MetricError::TooFewValues);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    let t = StudentsT::new(0.0, 1.0, k - 1.0)
        .expect("valid t distribution for k >= 2")
        .inverse_cdf(0.975);
    let half = t * (var / k).sqrt();
    Ok(Ci {
        mean,
        lo: mean - half,
        hi: mean + half,
    })
}
