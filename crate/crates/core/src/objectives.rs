//! The training objective: per-route losses (cross-entropy on Correct, MSE
//! on Mis-H, reweighed cross-entropy on Mis-L), the supervised contrastive
//! enhancement over C+1 classes, the prior regularizer, and their weighted
//! combination. Every term comes with an analytic gradient with respect to
//! the logits (or raw embeddings for the contrastive term).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::pseudo::{LabelTarget, LossRoute};
use crate::separation::PROB_FLOOR;
use crate::{QmixError, Result};

/// Balancing weights of the combined loss.
///
/// `lambda_reg` scales the prior regularizer (1 keeps the canonical form;
/// 0 is an extra ablation switch used by the baseline-degeneration checks).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the Mis-H MSE term.
    pub lambda_m: f64,
    /// Weight of the contrastive enhancement term.
    pub lambda_c: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the prior regularizer.
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_m: 1.0,
            lambda_c: 0.5,
            tau: 0.07,
            lambda_reg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(QmixError::invalid("tau must be positive"));
        }
        if self.lambda_m < 0.0 || self.lambda_c < 0.0 || self.lambda_reg < 0.0 {
            return Err(QmixError::invalid("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// One entry of the contrastive pool: a unit-norm projection embedding and
/// its C+1-way label (`num_classes` plays the "ungradable" extra class for
/// predicted Mis-L samples).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveItem {
    pub z: Vec<f64>,
    pub y_tilde: usize,
}

impl ContrastiveItem {
    pub fn new(z: Vec<f64>, y_tilde: usize) -> Result<Self> {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(QmixError::invalid(format!(
                "embedding norm {norm} is not 1"
            )));
        }
        Ok(ContrastiveItem { z, y_tilde })
    }
}

/// Scalar values of the individual terms, pre-weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub correct: f64,
    pub mis_h: f64,
    pub mis_l: f64,
    pub contrastive: f64,
    pub reg: f64,
}

fn route_rows(targets: &[LabelTarget], route: LossRoute) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.route == route)
        .map(|(i, _)| i)
        .collect()
}

fn cross_entropy_mean(targets: &[LabelTarget], probs: ArrayView2<f64>, rows: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in rows {
        let p = probs.row(i);
        total += targets[i]
            .y_bar
            .iter()
            .zip(p)
            .map(|(&y, &q)| -y * q.max(PROB_FLOOR).ln())
            .sum::<f64>();
    }
    total / rows.len() as f64
}

/// Mean cross-entropy of the refined labels over the Correct subset.
pub fn loss_correct(targets: &[LabelTarget], probs: ArrayView2<f64>) -> f64 {
    let rows = route_rows(targets, LossRoute::CrossEntropy);
    if rows.is_empty() {
        log::debug!("no Correct samples in batch; loss_correct = 0");
        return 0.0;
    }
    cross_entropy_mean(targets, probs, &rows)
}

/// Mean squared error between guessed labels and predictions over the Mis-H
/// subset.
pub fn loss_mis_h(targets: &[LabelTarget], probs: ArrayView2<f64>) -> f64 {
    let rows = route_rows(targets, LossRoute::MeanSquaredError);
    if rows.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &rows {
        let p = probs.row(i);
        total += targets[i]
            .y_bar
            .iter()
            .zip(p)
            .map(|(&y, &q)| (y - q) * (y - q))
            .sum::<f64>();
    }
    total / rows.len() as f64
}

/// Reweighed cross-entropy over the Mis-L subset: `omega` times the mean CE.
/// Exactly 0 when `omega` is 0 regardless of predictions.
pub fn loss_mis_l(targets: &[LabelTarget], probs: ArrayView2<f64>, omega: f64) -> f64 {
    if omega == 0.0 {
        return 0.0;
    }
    let rows = route_rows(targets, LossRoute::ReweighedCrossEntropy);
    if rows.is_empty() {
        return 0.0;
    }
    omega * cross_entropy_mean(targets, probs, &rows)
}

/// Prior regularizer: KL(pi || mean batch prediction). Zero prior classes
/// contribute zero.
pub fn loss_reg(probs: ArrayView2<f64>, prior: &[f64]) -> Result<f64> {
    let (n, c) = probs.dim();
    if prior.len() != c {
        return Err(QmixError::invalid("prior length mismatch"));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || prior.iter().any(|&p| p < 0.0) {
        return Err(QmixError::invalid("prior is not a probability vector"));
    }
    if n == 0 {
        return Err(QmixError::invalid("empty batch"));
    }
    let mut value = 0.0;
    for k in 0..c {
        if prior[k] == 0.0 {
            continue;
        }
        let mean = probs.column(k).sum() / n as f64;
        value += prior[k] * (prior[k] / mean.max(PROB_FLOOR)).ln();
    }
    Ok(value)
}

/// Supervised contrastive loss over a pool of unit-norm embeddings with
/// C+1-way labels, computed in log space. Anchors without a positive partner
/// are skipped; a pool with no valid anchors contributes 0.
pub fn loss_contrastive(items: &[ContrastiveItem], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(QmixError::invalid("tau must be positive"));
    }
    for item in items {
        let norm = item.z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(QmixError::invalid("contrastive item is not unit-norm"));
        }
    }
    let n = items.len();
    if n < 2 {
        return Ok(0.0);
    }
    let d = items[0].z.len();
    let mut z = Array2::zeros((n, d));
    for (i, item) in items.iter().enumerate() {
        for (j, &v) in item.z.iter().enumerate() {
            z[[i, j]] = v;
        }
    }
    let labels: Vec<usize> = items.iter().map(|it| it.y_tilde).collect();
    let (value, _) = contrastive_core(z.view(), &labels, tau);
    Ok(value)
}

/// Shared forward/backward over the similarity matrix. Returns the loss and
/// its gradient with respect to the (already unit-norm) embeddings.
fn contrastive_core(z: ArrayView2<f64>, labels: &[usize], tau: f64) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let sim = z.dot(&z.t());

    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect()
        })
        .collect();
    let anchors: Vec<usize> = (0..n).filter(|&i| !positives[i].is_empty()).collect();
    if anchors.is_empty() {
        log::debug!("contrastive pool has no valid anchors; loss = 0");
        return (0.0, Array2::zeros(z.raw_dim()));
    }
    let a_count = anchors.len() as f64;

    let mut value = 0.0;
    // Gradient with respect to the similarity entries, assembled per anchor.
    let mut grad_sim = Array2::<f64>::zeros((n, n));
    for &i in &anchors {
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                max = max.max(sim[[i, k]] / tau);
            }
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (sim[[i, k]] / tau - max).exp();
            }
        }
        let lse = max + denom.ln();

        let p_count = positives[i].len() as f64;
        let mut pos_sum = 0.0;
        for &j in &positives[i] {
            pos_sum += sim[[i, j]] / tau;
        }
        value += lse - pos_sum / p_count;

        for k in 0..n {
            if k == i {
                continue;
            }
            let softmax = (sim[[i, k]] / tau - lse).exp();
            let mut g = softmax / tau;
            if labels[k] == labels[i] {
                g -= 1.0 / (tau * p_count);
            }
            grad_sim[[i, k]] += g / a_count;
        }
    }
    value /= a_count;

    // d sim[i,k] / d z_i = z_k (and symmetrically for z_k).
    let mut grad_z = Array2::<f64>::zeros(z.raw_dim());
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            let g = grad_sim[[i, k]];
            if g == 0.0 {
                continue;
            }
            for d_idx in 0..z.ncols() {
                grad_z[[i, d_idx]] += g * z[[k, d_idx]];
                grad_z[[k, d_idx]] += g * z[[i, d_idx]];
            }
        }
    }
    (value, grad_z)
}

/// Contrastive loss on raw (pre-normalization) embeddings with its gradient.
/// Rows are normalized internally; the gradient is with respect to the raw
/// rows and includes the normalization Jacobian.
pub fn loss_contrastive_grad(
    raw: ArrayView2<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if tau <= 0.0 {
        return Err(QmixError::invalid("tau must be positive"));
    }
    if raw.nrows() != labels.len() {
        return Err(QmixError::invalid("embedding/label count mismatch"));
    }
    let n = raw.nrows();
    if n < 2 {
        return Ok((0.0, Array2::zeros(raw.raw_dim())));
    }
    let mut norms = Vec::with_capacity(n);
    let mut z = raw.to_owned();
    for mut row in z.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    let (value, grad_z) = contrastive_core(z.view(), labels, tau);

    // Through z = v / |v|: dv = (g - (g . z) z) / |v|.
    let mut grad_raw = Array2::<f64>::zeros(raw.raw_dim());
    for i in 0..n {
        let zi = z.row(i);
        let gi = grad_z.row(i);
        let dot: f64 = zi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
        for d_idx in 0..raw.ncols() {
            grad_raw[[i, d_idx]] = (gi[d_idx] - dot * zi[d_idx]) / norms[i];
        }
    }
    Ok((value, grad_raw))
}

/// Weighted combination:
/// `correct + mis_l + lambda_m * mis_h + lambda_c * contrastive + lambda_reg * reg`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.correct
        + parts.mis_l
        + weights.lambda_m * parts.mis_h
        + weights.lambda_c * parts.contrastive
        + weights.lambda_reg * parts.reg
}

/// Softmax Jacobian-vector product: given dL/dp for one sample, returns
/// dL/dlogits = p * (g - <g, p>).
fn softmax_jvp(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for k in 0..p.len() {
        out[k] = p[k] * (g[k] - dot);
    }
}

/// Gradient of [`loss_correct`] with respect to the logits (rows not in the
/// Correct subset get zero gradient).
pub fn loss_correct_grad(targets: &[LabelTarget], probs: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let rows = route_rows(targets, LossRoute::CrossEntropy);
    let mut grad = Array2::zeros(probs.raw_dim());
    if rows.is_empty() {
        return (0.0, grad);
    }
    let value = cross_entropy_mean(targets, probs, &rows);
    let scale = 1.0 / rows.len() as f64;
    for &i in &rows {
        for k in 0..probs.ncols() {
            grad[[i, k]] = scale * (probs[[i, k]] - targets[i].y_bar[k]);
        }
    }
    (value, grad)
}

/// Gradient of [`loss_mis_h`] with respect to the logits.
pub fn loss_mis_h_grad(targets: &[LabelTarget], probs: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let rows = route_rows(targets, LossRoute::MeanSquaredError);
    let mut grad = Array2::zeros(probs.raw_dim());
    if rows.is_empty() {
        return (0.0, grad);
    }
    let value = loss_mis_h(targets, probs);
    let scale = 1.0 / rows.len() as f64;
    let c = probs.ncols();
    let mut g = vec![0.0; c];
    let mut out = vec![0.0; c];
    for &i in &rows {
        let p: Vec<f64> = probs.row(i).to_vec();
        for k in 0..c {
            g[k] = 2.0 * scale * (p[k] - targets[i].y_bar[k]);
        }
        softmax_jvp(&p, &g, &mut out);
        for k in 0..c {
            grad[[i, k]] = out[k];
        }
    }
    (value, grad)
}

/// Gradient of [`loss_mis_l`] with respect to the logits.
pub fn loss_mis_l_grad(
    targets: &[LabelTarget],
    probs: ArrayView2<f64>,
    omega: f64,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(probs.raw_dim());
    if omega == 0.0 {
        return (0.0, grad);
    }
    let rows = route_rows(targets, LossRoute::ReweighedCrossEntropy);
    if rows.is_empty() {
        return (0.0, grad);
    }
    let value = loss_mis_l(targets, probs, omega);
    let scale = omega / rows.len() as f64;
    for &i in &rows {
        for k in 0..probs.ncols() {
            grad[[i, k]] = scale * (probs[[i, k]] - targets[i].y_bar[k]);
        }
    }
    (value, grad)
}

/// Gradient of [`loss_reg`] with respect to the logits (touches every row).
pub fn loss_reg_grad(probs: ArrayView2<f64>, prior: &[f64]) -> Result<(f64, Array2<f64>)> {
    let value = loss_reg(probs, prior)?;
    let (n, c) = probs.dim();
    let mut means = vec![0.0; c];
    for k in 0..c {
        means[k] = (probs.column(k).sum() / n as f64).max(PROB_FLOOR);
    }
    // dL/dp[i,k] = -pi_k / (n * mean_k)
    let mut g = vec![0.0; c];
    for k in 0..c {
        g[k] = if prior[k] > 0.0 {
            -prior[k] / (n as f64 * means[k])
        } else {
            0.0
        };
    }
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut out = vec![0.0; c];
    for i in 0..n {
        let p: Vec<f64> = probs.row(i).to_vec();
        softmax_jvp(&p, &g, &mut out);
        for k in 0..c {
            grad[[i, k]] = out[k];
        }
    }
    Ok((value, grad))
}
