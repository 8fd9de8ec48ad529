use super::{DownstreamError, Result};
use serde::{Deserialize, Serialize};

/// Area under the ROC curve via the rank statistic. Tied scores share their
/// average rank, so a tie between a positive and a negative counts one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DownstreamError::Config(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(DownstreamError::Metric(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DownstreamError::Metric(format!("AUROC is undefined with {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks are 1-based; a tie block [i, j) shares (i + 1 + j) / 2
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let in_block = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg * in_block as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Macro-averaged scores over every class in `0..n_classes`. A class never
/// predicted has precision 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][pred]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn classification_report(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ClassificationReport> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(DownstreamError::Config(format!("{} labels for {} predictions", truth.len(), pred.len())));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(DownstreamError::Config(format!("label {} outside {n_classes} classes", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes as f64;
    Ok(ClassificationReport {
        accuracy: (0..n_classes).map(|c| confusion[c][c]).sum::<usize>() as f64 / truth.len() as f64,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
        confusion,
    })
}
