//! Ranking and classification quality measures.
//!
//! AUC is computed by counting discordant/tied score pairs over groups of
//! equal scores, which is the textbook definition evaluated exactly: the
//! numerator is an integer plus half the tie count, formed in u64 before a
//! single f64 division. No trapezoid approximation, no epsilon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{count_a} scores for {count_b} labels")]
    LengthMismatch { count_a: usize, count_b: usize },
    #[error("AUC needs both classes; got {positives} positive and {negatives} negative labels")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores contain a non-finite value at index {index}")]
    NonFinite { index: usize },
}

/// Fraud is the positive class throughout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub f1_macro: f64,
    pub f1_fraud: f64,
    pub f1_normal: f64,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { count_a: scores.len(), count_b: labels.len() });
    }
    if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite { index });
    }
    Ok(())
}

/// A node counts as predicted fraud only when its score is strictly above
/// the threshold, so a score exactly at the threshold stays normal.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    assert_eq!(scores.len(), labels.len());
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => c.true_positives += 1,
            (true, false) => c.false_positives += 1,
            (false, false) => c.true_negatives += 1,
            (false, true) => c.false_negatives += 1,
        }
    }
    c
}

/// 2 tp / (2 tp + fp + fn), with an empty denominator scored as 0.
fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn f1_scores(c: &ConfusionCounts) -> (f64, f64, f64) {
    let fraud = f1_from(c.true_positives, c.false_positives, c.false_negatives);
    let normal = f1_from(c.true_negatives, c.false_negatives, c.false_positives);
    (0.5 * (fraud + normal), fraud, normal)
}

/// Unweighted mean of the fraud-as-positive and normal-as-positive F1.
pub fn f1_macro(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    f1_scores(&confusion(scores, labels, threshold)).0
}

/// Probability that a uniformly drawn (fraud, normal) pair is ranked
/// correctly, ties worth half. Exact: both pair counts are integers.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        wins += pos_here * negatives_below;
        ties += pos_here * neg_here;
        negatives_below += neg_here;
        i = j;
    }

    let pairs = positives as f64 * negatives as f64;
    Ok((wins as f64 + ties as f64 / 2.0) / pairs)
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalResult, MetricsError> {
    check_inputs(scores, labels)?;
    let confusion = confusion(scores, labels, threshold);
    let (f1_macro, f1_fraud, f1_normal) = f1_scores(&confusion);
    Ok(EvalResult { auc: auc(scores, labels)?, f1_macro, f1_fraud, f1_normal, threshold, confusion })
}
