//! Evaluation metrics: Quadratic Weighted Kappa for ordinal grade agreement
//! and ROC-AUC (Mann-Whitney form) for separation quality.

pub mod records;
pub mod report;

use crate::{QmixError, Result};

/// C x C confusion matrix; rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c < 2 {
            return Err(QmixError::invalid("confusion matrix needs C >= 2"));
        }
        if counts.iter().any(|row| row.len() != c) {
            return Err(QmixError::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_labels(true_labels: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if true_labels.len() != predicted.len() {
            return Err(QmixError::invalid("label/prediction length mismatch"));
        }
        let mut cm = ConfusionMatrix::new(num_classes);
        for (&t, &p) in true_labels.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(QmixError::invalid("class index out of range"));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn record(&mut self, true_label: usize, predicted: usize) {
        self.counts[true_label][predicted] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }
}

/// Quadratic Weighted Kappa outcome. `degenerate` flags the zero-denominator
/// convention (all chance-expected disagreement mass is zero), where the
/// value is defined as 0 so early chaotic epochs stay plottable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaScore {
    pub value: f64,
    pub degenerate: bool,
}

/// Chance-corrected agreement with quadratic ordinal penalty.
///
/// kappa = 1 - sum(w * O) / sum(w * E), with w_ij = (i-j)^2 / (C-1)^2,
/// O the observed proportion matrix and E the outer product of its
/// marginals.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<KappaScore> {
    let c = cm.num_classes();
    if c < 2 {
        return Err(QmixError::invalid("kappa needs C >= 2"));
    }
    let total = cm.total();
    if total == 0 {
        return Err(QmixError::invalid("kappa on empty confusion matrix"));
    }
    let n = total as f64;
    let denom_w = ((c - 1) * (c - 1)) as f64;

    let mut row_marginal = vec![0.0; c];
    let mut col_marginal = vec![0.0; c];
    for i in 0..c {
        for j in 0..c {
            let o = cm.counts[i][j] as f64 / n;
            row_marginal[i] += o;
            col_marginal[j] += o;
        }
    }

    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_w;
            observed += w * (cm.counts[i][j] as f64 / n);
            expected += w * row_marginal[i] * col_marginal[j];
        }
    }

    if expected == 0.0 {
        log::warn!("kappa denominator is zero (degenerate marginals); reporting 0");
        return Ok(KappaScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(KappaScore {
        value: 1.0 - observed / expected,
        degenerate: false,
    })
}

/// ROC-AUC as the Mann-Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counted 0.5. Computed via average
/// ranks, which matches exhaustive pairwise counting exactly.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(QmixError::invalid("scores/positives length mismatch"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(QmixError::invalid("non-finite score"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(QmixError::invalid(
            "roc_auc undefined: needs at least one positive and one negative",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1) + (j + 1)) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
