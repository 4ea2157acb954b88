//! Ranking metrics: AUC and relative improvement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC undefined: need both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("relative improvement undefined for baseline AUC {0}")]
    BadBaseline(f64),
}

/// Area under the ROC curve via the rank-sum statistic, O(n log n).
///
/// Tied scores receive the average of the ranks they span, which matches the
/// expected pairwise outcome of counting ties as half-wins.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the average rank of their block
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Quadratic reference implementation: fraction of (positive, negative)
/// pairs ranked correctly, ties counting half.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        let positives = labels.iter().filter(|&&l| l != 0).count();
        return Err(EvalError::SingleClass {
            positives,
            negatives: labels.len() - positives,
        });
    }
    Ok(wins / pairs)
}

/// Relative AUC improvement over a baseline, in percent.
pub fn improvement_pct(auc_model: f64, auc_base: f64) -> Result<f64, EvalError> {
    if !(auc_base > 0.0) {
        return Err(EvalError::BadBaseline(auc_base));
    }
    Ok((auc_model - auc_base) / auc_base * 100.0)
}

/// One evaluated (domain, model, seed) cell of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub domain_id: usize,
    pub model_tag: String,
    pub seed: u64,
    pub auc: f64,
    /// Relative improvement over the same-seed baseline, percent.
    pub imp_pct: Option<f64>,
}
