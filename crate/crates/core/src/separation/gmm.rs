//! Three-component bivariate Gaussian mixture fitted with EM.
//!
//! Points live in the normalized (loss, entropy) unit square. The fit is
//! fully deterministic under the default loss-quantile initialization; a
//! k-means initialization is available behind [`GmmInit::KMeans`].

use rand::Rng;

use crate::rng::{derive_rng, stream};
use crate::{NoiseType, QmixError, Result};

/// Minimum points for a 3-component fit (3 per component).
pub const MIN_POINTS: usize = 9;

/// Variance floor applied to both axes of every component.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Correlation clamp keeping covariances non-singular.
pub const RHO_LIMIT: f64 = 0.999;

/// One bivariate Gaussian component plus its mixing weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmComponent {
    /// Mean on the loss axis.
    pub mu1: f64,
    /// Mean on the uncertainty axis.
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Correlation between the two axes.
    pub rho: f64,
    /// Mixing weight.
    pub lam: f64,
}

impl GmmComponent {
    /// Log density of the bivariate normal at `(x, y)`, evaluated through
    /// the explicit quadratic form.
    pub fn log_pdf(&self, x: f64, y: f64) -> f64 {
        let one_minus_r2 = (1.0 - self.rho * self.rho).max(1e-12);
        let dx = (x - self.mu1) / self.sigma1;
        let dy = (y - self.mu2) / self.sigma2;
        let quad = (dx * dx - 2.0 * self.rho * dx * dy + dy * dy) / one_minus_r2;
        -(2.0 * std::f64::consts::PI * self.sigma1 * self.sigma2 * one_minus_r2.sqrt()).ln()
            - 0.5 * quad
    }
}

/// EM fit diagnostics. The mean log-likelihood trace holds one entry per
/// E-step and is non-decreasing on healthy fits.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub converged: bool,
    pub log_likelihood_trace: Vec<f64>,
}

/// A fitted three-component model with its component-to-role map.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: [GmmComponent; 3],
    /// `role_map[k]` is the role of component `k`; always a bijection onto
    /// {Correct, MisH, MisL}.
    pub role_map: [NoiseType; 3],
    pub diagnostics: FitDiagnostics,
}

impl GmmModel {
    /// Index of the component mapped to `role`.
    pub fn component_for(&self, role: NoiseType) -> usize {
        self.role_map.iter().position(|&r| r == role).unwrap()
    }
}

/// Initialization policy for EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmInit {
    /// Sort by the loss axis, split into three quantile groups, initialize
    /// each component from its group moments. Deterministic; seed unused.
    LossQuantile,
    /// k-means++ seeding followed by 10 Lloyd iterations, then group moments.
    KMeans,
}

fn moments(points: &[[f64; 2]], weights: Option<&[f64]>) -> GmmComponent {
    let total: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => points.len() as f64,
    };
    let total = total.max(1e-12);
    let wt = |i: usize| weights.map(|w| w[i]).unwrap_or(1.0);

    let mut mu1 = 0.0;
    let mut mu2 = 0.0;
    for (i, p) in points.iter().enumerate() {
        mu1 += wt(i) * p[0];
        mu2 += wt(i) * p[1];
    }
    mu1 /= total;
    mu2 /= total;

    let mut v1 = 0.0;
    let mut v2 = 0.0;
    let mut cov = 0.0;
    for (i, p) in points.iter().enumerate() {
        let dx = p[0] - mu1;
        let dy = p[1] - mu2;
        v1 += wt(i) * dx * dx;
        v2 += wt(i) * dy * dy;
        cov += wt(i) * dx * dy;
    }
    v1 = (v1 / total).max(VARIANCE_FLOOR);
    v2 = (v2 / total).max(VARIANCE_FLOOR);
    let sigma1 = v1.sqrt();
    let sigma2 = v2.sqrt();
    let rho = (cov / total / (sigma1 * sigma2)).clamp(-RHO_LIMIT, RHO_LIMIT);

    GmmComponent {
        mu1,
        mu2,
        sigma1,
        sigma2,
        rho,
        lam: 1.0 / 3.0,
    }
}

fn init_loss_quantile(points: &[[f64; 2]]) -> [GmmComponent; 3] {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a][0]
            .partial_cmp(&points[b][0])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n = points.len();
    let bounds = [0, n / 3, 2 * n / 3, n];
    let mut comps = [moments(points, None); 3];
    for k in 0..3 {
        let group: Vec<[f64; 2]> = order[bounds[k]..bounds[k + 1]]
            .iter()
            .map(|&i| points[i])
            .collect();
        let mut c = moments(&group, None);
        c.lam = group.len() as f64 / n as f64;
        comps[k] = c;
    }
    comps
}

fn init_kmeans(points: &[[f64; 2]], seed: u64) -> [GmmComponent; 3] {
    let mut rng = derive_rng(seed, &[stream::GMM_INIT]);
    let n = points.len();

    // k-means++ seeding.
    let mut centers = vec![points[rng.gen_range(0..n)]];
    while centers.len() < 3 {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(points[rng.gen_range(0..n)]);
            continue;
        }
        let mut draw = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            draw -= d;
            if draw <= 0.0 {
                pick = i;
                break;
            }
        }
        centers.push(points[pick]);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assign[i] = best;
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<[f64; 2]> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == k)
                .map(|(p, _)| *p)
                .collect();
            if !members.is_empty() {
                center[0] = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
                center[1] = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let mut comps = [moments(points, None); 3];
    for k in 0..3 {
        let members: Vec<[f64; 2]> = points
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == k)
            .map(|(p, _)| *p)
            .collect();
        if members.len() >= 2 {
            let mut c = moments(&members, None);
            c.lam = (members.len() as f64 / n as f64).max(1e-3);
            comps[k] = c;
        }
    }
    let lam_sum: f64 = comps.iter().map(|c| c.lam).sum();
    for c in &mut comps {
        c.lam /= lam_sum;
    }
    comps
}

fn log_sum_exp3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// E-step: responsibilities and the mean log-likelihood of the current
/// parameters.
fn e_step(points: &[[f64; 2]], comps: &[GmmComponent; 3]) -> (Vec<[f64; 3]>, f64) {
    let mut resp = Vec::with_capacity(points.len());
    let mut ll_sum = 0.0;
    for p in points {
        let lp: Vec<f64> = comps
            .iter()
            .map(|c| c.lam.max(1e-300).ln() + c.log_pdf(p[0], p[1]))
            .collect();
        let lse = log_sum_exp3(lp[0], lp[1], lp[2]);
        ll_sum += lse;
        resp.push([
            (lp[0] - lse).exp(),
            (lp[1] - lse).exp(),
            (lp[2] - lse).exp(),
        ]);
    }
    (resp, ll_sum / points.len() as f64)
}

fn m_step(points: &[[f64; 2]], resp: &[[f64; 3]]) -> [GmmComponent; 3] {
    let n = points.len() as f64;
    let mut comps = [GmmComponent {
        mu1: 0.0,
        mu2: 0.0,
        sigma1: 1.0,
        sigma2: 1.0,
        rho: 0.0,
        lam: 1.0 / 3.0,
    }; 3];
    let mut lams = [0.0f64; 3];
    for k in 0..3 {
        let weights: Vec<f64> = resp.iter().map(|r| r[k]).collect();
        let nk: f64 = weights.iter().sum();
        let mut c = moments(points, Some(&weights));
        c.lam = (nk / n).max(1e-12);
        lams[k] = c.lam;
        comps[k] = c;
    }
    let lam_sum: f64 = lams.iter().sum();
    for c in &mut comps {
        c.lam /= lam_sum;
    }
    comps
}

/// Fits a three-component bivariate GMM with EM.
///
/// Runs until the mean log-likelihood changes by less than `tol` or
/// `max_iter` iterations. Variances are floored at [`VARIANCE_FLOOR`] and
/// the correlation clamped to +/-[`RHO_LIMIT`] every M-step. Returns
/// [`QmixError::FitUnderdetermined`] for fewer than [`MIN_POINTS`] points or
/// an all-identical point set; callers fall back per class.
///
/// The returned model has an identity role map; use [`assign_roles`] (or
/// [`assign_roles_by_loss`]) to bind components to roles.
pub fn fit_gmm3(
    points: &[[f64; 2]],
    tol: f64,
    max_iter: usize,
    seed: u64,
    init: GmmInit,
) -> Result<GmmModel> {
    if tol <= 0.0 {
        return Err(QmixError::invalid("tol must be positive"));
    }
    if points.len() < MIN_POINTS {
        return Err(QmixError::FitUnderdetermined(format!(
            "{} points < minimum {MIN_POINTS}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(QmixError::invalid("non-finite point"));
    }
    let first = points[0];
    if points.iter().all(|p| *p == first) {
        return Err(QmixError::FitUnderdetermined(
            "all points identical".into(),
        ));
    }

    let mut comps = match init {
        GmmInit::LossQuantile => init_loss_quantile(points),
        GmmInit::KMeans => init_kmeans(points, seed),
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut final_ll = f64::NEG_INFINITY;

    for iter in 0..max_iter {
        let (resp, mean_ll) = e_step(points, &comps);
        trace.push(mean_ll);
        final_ll = mean_ll;
        if iter > 0 && (mean_ll - trace[iter - 1]).abs() < tol {
            converged = true;
            break;
        }
        comps = m_step(points, &resp);
        iterations = iter + 1;
    }
    if !converged {
        // The loop exhausted max_iter with one M-step past the last recorded
        // likelihood; score the returned parameters.
        let (_, mean_ll) = e_step(points, &comps);
        trace.push(mean_ll);
        final_ll = mean_ll;
    }

    Ok(GmmModel {
        components: comps,
        role_map: [NoiseType::Correct, NoiseType::MisH, NoiseType::MisL],
        diagnostics: FitDiagnostics {
            iterations,
            final_log_likelihood: final_ll,
            converged,
            log_likelihood_trace: trace,
        },
    })
}

/// Mixture posterior over the three roles at `point`, computed in log space.
///
/// Returned as `[w_correct, w_mis_h, w_mis_l]` (role order), summing to 1.
pub fn posterior(model: &GmmModel, point: [f64; 2]) -> [f64; 3] {
    let lp: Vec<f64> = model
        .components
        .iter()
        .map(|c| c.lam.max(1e-300).ln() + c.log_pdf(point[0], point[1]))
        .collect();
    let lse = log_sum_exp3(lp[0], lp[1], lp[2]);
    let mut by_role = [0.0; 3];
    for k in 0..3 {
        by_role[model.role_map[k].index()] = (lp[k] - lse).exp();
    }
    by_role
}

/// Binds components to roles from the joint geometry: the component with the
/// lowest loss mean is Correct; of the remaining two, the one with the higher
/// uncertainty mean is Mis-L and the other Mis-H. Ties go to the lower
/// component index.
pub fn assign_roles(components: &[GmmComponent; 3]) -> [NoiseType; 3] {
    let correct = argmin_by(components, |c| c.mu1);
    let rest: Vec<usize> = (0..3).filter(|&k| k != correct).collect();
    let misl = if components[rest[1]].mu2 > components[rest[0]].mu2 {
        rest[1]
    } else {
        rest[0]
    };
    let mish = if misl == rest[0] { rest[1] } else { rest[0] };

    let mut map = [NoiseType::Correct; 3];
    map[correct] = NoiseType::Correct;
    map[mish] = NoiseType::MisH;
    map[misl] = NoiseType::MisL;
    map
}

/// Loss-only role binding used when the uncertainty axis is disabled:
/// lowest loss mean is Correct, highest is Mis-H, the middle one Mis-L
/// (mislabeled low-quality samples sit between the two on the loss axis).
pub fn assign_roles_by_loss(components: &[GmmComponent; 3]) -> [NoiseType; 3] {
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        components[a]
            .mu1
            .partial_cmp(&components[b].mu1)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut map = [NoiseType::Correct; 3];
    map[order[0]] = NoiseType::Correct;
    map[order[1]] = NoiseType::MisL;
    map[order[2]] = NoiseType::MisH;
    map
}

fn argmin_by(components: &[GmmComponent; 3], key: impl Fn(&GmmComponent) -> f64) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if key(&components[k]) < key(&components[best]) {
            best = k;
        }
    }
    best
}
