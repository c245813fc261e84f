//! Multi-label ranking metrics: average precision, class- and sample-
//! aggregated mAP, and rank-statistic ROC-AUC for actionness localization.

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("average precision needs at least one positive label")]
    NoPositives,
    #[error("no class with a positive sample")]
    NoValidClass,
    #[error("no sample with a positive label")]
    NoValidSample,
    #[error("AUC needs both a positive and a negative frame")]
    SingleClassMask,
    #[error("scores and labels disagree: {0}")]
    Shape(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Scores and binary labels over samples (rows) and classes (columns).
#[derive(Debug, Clone)]
pub struct EvalTable {
    pub scores: Tensor,
    pub labels: Vec<bool>,
}

impl EvalTable {
    pub fn new(scores: Tensor, labels: Vec<bool>) -> Result<Self> {
        if scores.numel() != labels.len() {
            return Err(MetricsError::Shape(format!(
                "{} scores vs {} labels",
                scores.numel(),
                labels.len()
            )));
        }
        Ok(EvalTable { scores, labels })
    }

    fn label(&self, m: usize, c: usize) -> bool {
        self.labels[m * self.scores.cols() + c]
    }
}

/// Mean over positive ranks of precision-at-rank, with descending score
/// order and ties broken by original index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Per-axis mAP outcome: the mean AP plus which rows/columns were skipped
/// for having no positives.
#[derive(Debug, Clone)]
pub struct MapScore {
    pub value: f64,
    pub per_item: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Macro mAP: AP per class over the sample axis, averaged across classes
/// that have at least one positive sample.
pub fn map_c(table: &EvalTable) -> Result<MapScore> {
    let (m, c) = (table.scores.rows(), table.scores.cols());
    let mut per_item = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..c {
        let scores: Vec<f64> = (0..m).map(|i| table.scores.at(i, j)).collect();
        let labels: Vec<bool> = (0..m).map(|i| table.label(i, j)).collect();
        match average_precision(&scores, &labels) {
            Ok(ap) => {
                per_item.push(Some(ap));
                sum += ap;
                count += 1;
            }
            Err(MetricsError::NoPositives) => {
                per_item.push(None);
                skipped.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(MetricsError::NoValidClass);
    }
    Ok(MapScore { value: sum / count as f64, per_item, skipped })
}

/// Micro mAP: AP per sample over the class axis, averaged across samples
/// that have at least one positive label.
pub fn map_s(table: &EvalTable) -> Result<MapScore> {
    let (m, c) = (table.scores.rows(), table.scores.cols());
    let mut per_item = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        let scores: Vec<f64> = (0..c).map(|j| table.scores.at(i, j)).collect();
        let labels: Vec<bool> = (0..c).map(|j| table.label(i, j)).collect();
        match average_precision(&scores, &labels) {
            Ok(ap) => {
                per_item.push(Some(ap));
                sum += ap;
                count += 1;
            }
            Err(MetricsError::NoPositives) => {
                per_item.push(None);
                skipped.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(MetricsError::NoValidSample);
    }
    Ok(MapScore { value: sum / count as f64, per_item, skipped })
}

/// ROC-AUC via the Mann-Whitney rank statistic with ties averaged.
pub fn actionness_auc(scores: &[f64], mask: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), mask.len());
    let pos = mask.iter().filter(|&&m| m).count();
    let neg = mask.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClassMask);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tied groups (1-based ranks)
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = mask.iter().zip(&ranks).filter(|(m, _)| **m).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}
