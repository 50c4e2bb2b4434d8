//! Per-sample (loss, entropy) statistics and per-class sample separation.
//!
//! Each training sample gets a cross-entropy loss on its given label and a
//! prediction-entropy uncertainty. Within every given-label class the joint
//! statistics are min-max normalized and a three-component bivariate GMM is
//! fitted; its posteriors yield a Correct / Mis-H / Mis-L indicator per
//! sample.

pub mod gmm;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{NoiseType, QmixError, Result};
pub use gmm::{
    assign_roles, assign_roles_by_loss, fit_gmm3, posterior, FitDiagnostics, GmmComponent,
    GmmInit, GmmModel, MIN_POINTS,
};

/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-sample separation statistics: loss on the given label and prediction
/// entropy, tagged with the given-label class (separation runs per class).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub sample_id: String,
    /// Cross-entropy of the given label.
    pub l: f64,
    /// Prediction entropy.
    pub e: f64,
    /// Given-label class index.
    pub class: usize,
}

/// Posterior triple (role order: Correct, Mis-H, Mis-L) and the argmax
/// indicator for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationOutcome {
    pub sample_id: String,
    pub w: [f64; 3],
    /// 0 = Correct, 1 = Mis-H, 2 = Mis-L; argmax of `w` with ties resolved
    /// toward the lower index (Correct first).
    pub n: usize,
}

impl SeparationOutcome {
    pub fn noise_type(&self) -> NoiseType {
        NoiseType::from_index(self.n).unwrap()
    }
}

/// Knobs for [`separate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    /// Mean log-likelihood convergence tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub init: GmmInit,
    /// When false the entropy axis is replaced by a constant and roles are
    /// assigned purely from loss means (small-loss-only ablation).
    pub use_uncertainty: bool,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            tol: 1e-6,
            max_iter: 100,
            seed: 0,
            init: GmmInit::LossQuantile,
            use_uncertainty: true,
        }
    }
}

/// Computes per-sample stats from a row-stochastic probability matrix and
/// given labels: `l_i` is the cross-entropy of the given label, `e_i` the
/// entropy of the prediction (0 ln 0 := 0).
pub fn compute_stats(
    sample_ids: &[String],
    probabilities: ArrayView2<f64>,
    given_labels: &[usize],
) -> Result<Vec<SampleStats>> {
    let (n, c) = probabilities.dim();
    if sample_ids.len() != n || given_labels.len() != n {
        return Err(QmixError::invalid("ids/probabilities/labels length mismatch"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = probabilities.row(i);
        let sum: f64 = row.sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(QmixError::invalid(format!(
                "probability row {i} sums to {sum}, not 1"
            )));
        }
        let label = given_labels[i];
        if label >= c {
            return Err(QmixError::invalid(format!("label {label} out of range")));
        }
        let l = -row[label].max(PROB_FLOOR).ln();
        let e = -row
            .iter()
            .map(|&p| if p > 0.0 { p * p.max(PROB_FLOOR).ln() } else { 0.0 })
            .sum::<f64>();
        out.push(SampleStats {
            sample_id: sample_ids[i].clone(),
            l,
            e,
            class: label,
        });
    }
    Ok(out)
}

/// Min-max normalizes a class's stats onto the unit square. A degenerate
/// axis (max == min) maps to the constant 0.5.
pub fn normalize_stats(stats: &[SampleStats]) -> Result<Vec<[f64; 2]>> {
    if stats.len() < 2 {
        return Err(QmixError::invalid("normalize_stats needs >= 2 samples"));
    }
    let scale = |values: Vec<f64>| -> Vec<f64> {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            return vec![0.5; values.len()];
        }
        values.into_iter().map(|v| (v - min) / (max - min)).collect()
    };
    let ls = scale(stats.iter().map(|s| s.l).collect());
    let es = scale(stats.iter().map(|s| s.e).collect());
    Ok(ls.into_iter().zip(es).map(|(l, e)| [l, e]).collect())
}

/// Everything the separation stage produced, including per-sample normalized
/// coordinates (for logging) and the per-class models.
#[derive(Debug, Clone)]
pub struct DatasetSeparation {
    /// Aligned with the input stats order.
    pub outcomes: Vec<SeparationOutcome>,
    /// Aligned normalized (loss, entropy) coordinates.
    pub normalized: Vec<[f64; 2]>,
    /// Per-class fitted model; `None` where the class fell back to
    /// all-Correct.
    pub models: Vec<Option<GmmModel>>,
}

/// Separates every sample into Correct / Mis-H / Mis-L, per given-label
/// class: normalize, fit the mixture, bind roles, take posteriors.
///
/// Classes that cannot support a fit fall back to all-Correct with
/// `w = (1, 0, 0)` and a logged warning; empty classes are skipped.
pub fn separate_dataset(
    stats: &[SampleStats],
    num_classes: usize,
    config: &SeparationConfig,
) -> DatasetSeparation {
    let mut class_indices: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in stats.iter().enumerate() {
        class_indices[s.class].push(i);
    }

    let per_class: Vec<(Vec<[f64; 2]>, Vec<[f64; 3]>, Option<GmmModel>)> = class_indices
        .par_iter()
        .enumerate()
        .map(|(class, indices)| separate_class(stats, class, indices, config))
        .collect();

    let mut outcomes: Vec<Option<SeparationOutcome>> = vec![None; stats.len()];
    let mut normalized = vec![[0.0; 2]; stats.len()];
    let mut models = Vec::with_capacity(num_classes);
    for (class, (coords, posts, model)) in per_class.into_iter().enumerate() {
        for (j, &i) in class_indices[class].iter().enumerate() {
            normalized[i] = coords[j];
            let w = posts[j];
            outcomes[i] = Some(SeparationOutcome {
                sample_id: stats[i].sample_id.clone(),
                n: argmax_low_tie(&w),
                w,
            });
        }
        models.push(model);
    }

    DatasetSeparation {
        outcomes: outcomes.into_iter().map(Option::unwrap).collect(),
        normalized,
        models,
    }
}

fn separate_class(
    stats: &[SampleStats],
    class: usize,
    indices: &[usize],
    config: &SeparationConfig,
) -> (Vec<[f64; 2]>, Vec<[f64; 3]>, Option<GmmModel>) {
    if indices.is_empty() {
        log::warn!("class {class}: no samples, skipped");
        return (Vec::new(), Vec::new(), None);
    }
    let class_stats: Vec<SampleStats> = indices.iter().map(|&i| stats[i].clone()).collect();

    let fallback = |coords: Vec<[f64; 2]>| {
        log::warn!("class {class}: falling back to all-Correct");
        let posts = vec![[1.0, 0.0, 0.0]; indices.len()];
        (coords, posts, None)
    };

    let mut coords = match normalize_stats(&class_stats) {
        Ok(c) => c,
        Err(_) => return fallback(vec![[0.5, 0.5]; indices.len()]),
    };
    if !config.use_uncertainty {
        for c in &mut coords {
            c[1] = 0.5;
        }
    }

    match fit_gmm3(&coords, config.tol, config.max_iter, config.seed, config.init) {
        Ok(mut model) => {
            model.role_map = if config.use_uncertainty {
                assign_roles(&model.components)
            } else {
                assign_roles_by_loss(&model.components)
            };
            let posts = coords.iter().map(|&p| posterior(&model, p)).collect();
            (coords, posts, Some(model))
        }
        Err(QmixError::FitUnderdetermined(why)) => {
            log::warn!("class {class}: {why}");
            fallback(coords)
        }
        Err(err) => {
            log::warn!("class {class}: fit failed ({err})");
            fallback(coords)
        }
    }
}

fn argmax_low_tie(w: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if w[k] > w[best] {
            best = k;
        }
    }
    best
}
