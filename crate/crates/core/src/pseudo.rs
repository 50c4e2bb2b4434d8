//! Pseudo-label construction: co-refinement for Correct/Mis-L samples,
//! co-guessing for Mis-H samples, and the linearly decaying Mis-L loss
//! weight schedule.

use serde::{Deserialize, Serialize};

use crate::separation::SeparationOutcome;
use crate::{NoiseType, QmixError, Result};

/// Which loss consumes a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossRoute {
    /// Correct samples: cross-entropy.
    CrossEntropy,
    /// Mis-H samples: mean squared error on probabilities.
    MeanSquaredError,
    /// Mis-L samples: cross-entropy scaled by the decaying weight.
    ReweighedCrossEntropy,
}

impl LossRoute {
    pub fn for_noise(n: NoiseType) -> Self {
        match n {
            NoiseType::Correct => LossRoute::CrossEntropy,
            NoiseType::MisH => LossRoute::MeanSquaredError,
            NoiseType::MisL => LossRoute::ReweighedCrossEntropy,
        }
    }
}

/// A refined or guessed soft label with its loss routing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTarget {
    pub sample_id: String,
    pub y_bar: Vec<f64>,
    pub route: LossRoute,
    /// Refinement weight used to retain the original label (1 for pure
    /// label keeping, 0 for pure prediction averaging).
    pub w_label: f64,
}

/// Mis-L weight schedule: starts at `omega0` when separation begins and
/// decays linearly to exactly 0 at the final epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub omega0: f64,
    /// Total training epochs T.
    pub total_epochs: usize,
    /// Warm-up epochs T_w.
    pub warmup_epochs: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(QmixError::invalid("warmup_epochs must be < total_epochs"));
        }
        if self.omega0 < 0.0 {
            return Err(QmixError::invalid("omega0 must be >= 0"));
        }
        Ok(())
    }
}

/// Refinement-weight choice for predicted Correct and Mis-L samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelingWeights {
    /// Correct keeps w0; Mis-L drops its label entirely (weight 0).
    CorrectOnly,
    /// Correct keeps w0; Mis-L keeps w2.
    RoleSpecific,
    /// Both keep w0 + w2 (the posterior mass of the two label-keeping
    /// roles). Best-performing choice; the default.
    #[default]
    Combined,
}

impl LabelingWeights {
    fn weight(self, outcome: &SeparationOutcome, role: NoiseType) -> f64 {
        match (self, role) {
            (LabelingWeights::CorrectOnly, NoiseType::Correct) => outcome.w[0],
            (LabelingWeights::CorrectOnly, _) => 0.0,
            (LabelingWeights::RoleSpecific, NoiseType::Correct) => outcome.w[0],
            (LabelingWeights::RoleSpecific, _) => outcome.w[2],
            (LabelingWeights::Combined, _) => outcome.w[0] + outcome.w[2],
        }
    }
}

fn check_stochastic(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !v.is_finite() || v < -1e-12) || (sum - 1.0).abs() > 1e-6 {
        return Err(QmixError::invalid(format!(
            "{what} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Linearly combines the original one-hot label with the mean of the own
/// network's weak-view predictions: `w * y + (1 - w) * mean(preds)`.
pub fn co_refine(y: &[f64], preds: &[Vec<f64>], w_label: f64) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(QmixError::invalid("co_refine needs at least one prediction"));
    }
    if !(0.0..=1.0).contains(&w_label) {
        return Err(QmixError::invalid("w_label must lie in [0, 1]"));
    }
    check_stochastic(y, "label")?;
    for p in preds {
        check_stochastic(p, "prediction")?;
        if p.len() != y.len() {
            return Err(QmixError::invalid("prediction length mismatch"));
        }
    }
    let m = preds.len() as f64;
    Ok((0..y.len())
        .map(|c| {
            let mean = preds.iter().map(|p| p[c]).sum::<f64>() / m;
            w_label * y[c] + (1.0 - w_label) * mean
        })
        .collect())
}

/// Pseudo label for an unlabeled (Mis-H) sample: the plain average over the
/// 2M weak-view predictions of both networks.
pub fn co_guess(preds_a: &[Vec<f64>], preds_b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if preds_a.is_empty() || preds_a.len() != preds_b.len() {
        return Err(QmixError::invalid(
            "co_guess needs the same number of views from both networks",
        ));
    }
    let c = preds_a[0].len();
    for p in preds_a.iter().chain(preds_b) {
        check_stochastic(p, "prediction")?;
        if p.len() != c {
            return Err(QmixError::invalid("prediction length mismatch"));
        }
    }
    let total = (preds_a.len() + preds_b.len()) as f64;
    Ok((0..c)
        .map(|k| {
            preds_a
                .iter()
                .chain(preds_b)
                .map(|p| p[k])
                .sum::<f64>()
                / total
        })
        .collect())
}

/// The Mis-L loss weight at epoch `t`: `omega0 * (T - t) / (T - T_w)`,
/// clamped to `[0, omega0]`. Undefined during warm-up (callers must not
/// query before separation starts).
pub fn misl_weight(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if t < cfg.warmup_epochs || t > cfg.total_epochs {
        return Err(QmixError::invalid(format!(
            "schedule undefined at epoch {t} (valid range {}..={})",
            cfg.warmup_epochs, cfg.total_epochs
        )));
    }
    let frac =
        (cfg.total_epochs - t) as f64 / (cfg.total_epochs - cfg.warmup_epochs) as f64;
    Ok((cfg.omega0 * frac).clamp(0.0, cfg.omega0))
}

/// Per-sample inputs to [`build_targets`]. The outcome comes from the peer
/// network (co-training); predictions are per weak view.
#[derive(Debug)]
pub struct TargetInput<'a> {
    pub sample_id: &'a str,
    pub given_label: usize,
    pub outcome: &'a SeparationOutcome,
    pub own_preds: &'a [Vec<f64>],
    pub peer_preds: &'a [Vec<f64>],
}

/// The targets of one batch plus the Mis-L weight they carry.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub targets: Vec<LabelTarget>,
    pub misl_weight: f64,
}

/// Routes every sample by its peer-assigned indicator and produces its
/// training target: Correct and Mis-L refine their own label, Mis-H samples
/// get a co-guessed pseudo label from both networks.
pub fn build_targets(
    inputs: &[TargetInput<'_>],
    num_classes: usize,
    epoch: usize,
    schedule: &ScheduleConfig,
    weights: LabelingWeights,
) -> Result<TargetBatch> {
    let omega = misl_weight(epoch, schedule)?;
    let mut targets = Vec::with_capacity(inputs.len());
    for input in inputs {
        if input.outcome.sample_id != input.sample_id {
            return Err(QmixError::TrainingAborted(format!(
                "pipeline desync: outcome for `{}` paired with sample `{}`",
                input.outcome.sample_id, input.sample_id
            )));
        }
        if input.given_label >= num_classes {
            return Err(QmixError::invalid("given label out of range"));
        }
        let role = input.outcome.noise_type();
        let mut one_hot = vec![0.0; num_classes];
        one_hot[input.given_label] = 1.0;

        let (y_bar, w_label) = match role {
            NoiseType::Correct | NoiseType::MisL => {
                let w = weights.weight(input.outcome, role).clamp(0.0, 1.0);
                (co_refine(&one_hot, input.own_preds, w)?, w)
            }
            NoiseType::MisH => (co_guess(input.own_preds, input.peer_preds)?, 0.0),
        };
        targets.push(LabelTarget {
            sample_id: input.sample_id.to_string(),
            y_bar,
            route: LossRoute::for_noise(role),
            w_label,
        });
    }
    Ok(TargetBatch {
        targets,
        misl_weight: omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn outcome(id: &str, w: [f64; 3]) -> SeparationOutcome {
        let mut n = 0;
        for k in 1..3 {
            if w[k] > w[n] {
                n = k;
            }
        }
        SeparationOutcome {
            sample_id: id.to_string(),
            w,
            n,
        }
    }

    #[test]
    fn refine_identity_at_full_weight() {
        let y = vec![0.0, 1.0, 0.0];
        let preds = vec![vec![0.2, 0.3, 0.5]];
        assert_eq!(co_refine(&y, &preds, 1.0).unwrap(), y);
    }

    #[test]
    fn refine_pure_prediction_at_zero_weight() {
        let y = vec![1.0, 0.0];
        let preds = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(co_refine(&y, &preds, 0.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn refine_convex_combination() {
        let y = vec![1.0, 0.0];
        let preds = vec![vec![0.5, 0.5]];
        let r = co_refine(&y, &preds, 0.6).unwrap();
        assert!((r[0] - 0.8).abs() < 1e-12);
        assert!((r[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn refine_rejects_non_stochastic() {
        let y = vec![1.0, 0.0];
        assert!(co_refine(&y, &[vec![0.9, 0.3]], 0.5).is_err());
    }

    #[test]
    fn guess_identical_predictions_pass_through() {
        let p = vec![0.1, 0.6, 0.3];
        let a = vec![p.clone(), p.clone()];
        let b = vec![p.clone(), p.clone()];
        let g = co_guess(&a, &b).unwrap();
        for (x, y) in g.iter().zip(&p) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn guess_matches_direct_sum_oracle() {
        let mut rng = crate::rng::derive_rng(15, &[0x31]);
        for _ in 0..50 {
            let mk = || {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let a = vec![mk(), mk()];
            let b = vec![mk(), mk()];
            let g = co_guess(&a, &b).unwrap();
            for c in 0..4 {
                let direct = (a[0][c] + a[1][c] + b[0][c] + b[1][c]) / 4.0;
                assert!((g[c] - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn guess_midpoint_of_uniform_and_one_hot() {
        let a = vec![vec![0.5, 0.5]];
        let b = vec![vec![1.0, 0.0]];
        assert_eq!(co_guess(&a, &b).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn guess_rejects_mismatched_view_counts() {
        let a = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let b = vec![vec![0.5, 0.5]];
        assert!(co_guess(&a, &b).is_err());
    }

    #[test]
    fn schedule_endpoints_exact() {
        let cfg = ScheduleConfig {
            omega0: 0.1,
            total_epochs: 100,
            warmup_epochs: 10,
        };
        assert_eq!(misl_weight(10, &cfg).unwrap(), 0.1);
        assert_eq!(misl_weight(100, &cfg).unwrap(), 0.0);
        assert!((misl_weight(55, &cfg).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn schedule_undefined_during_warmup() {
        let cfg = ScheduleConfig {
            omega0: 0.1,
            total_epochs: 100,
            warmup_epochs: 10,
        };
        assert!(misl_weight(9, &cfg).is_err());
    }

    #[test]
    fn schedule_non_increasing_and_linear() {
        let cfg = ScheduleConfig {
            omega0: 0.25,
            total_epochs: 60,
            warmup_epochs: 5,
        };
        let mut prev = f64::INFINITY;
        for t in 5..=60 {
            let w = misl_weight(t, &cfg).unwrap();
            assert!(w <= prev);
            // Linear: matches the closed form exactly.
            let expect = 0.25 * (60 - t) as f64 / 55.0;
            assert_eq!(w, expect);
            prev = w;
        }
    }

    #[test]
    fn targets_confident_correct_is_identity() {
        let o = outcome("a", [1.0, 0.0, 0.0]);
        let preds = vec![vec![0.2, 0.8], vec![0.3, 0.7]];
        let batch = build_targets(
            &[TargetInput {
                sample_id: "a",
                given_label: 0,
                outcome: &o,
                own_preds: &preds,
                peer_preds: &preds,
            }],
            2,
            10,
            &ScheduleConfig {
                omega0: 0.1,
                total_epochs: 100,
                warmup_epochs: 10,
            },
            LabelingWeights::Combined,
        )
        .unwrap();
        let t = &batch.targets[0];
        assert_eq!(t.route, LossRoute::CrossEntropy);
        assert_eq!(t.w_label, 1.0);
        assert_eq!(t.y_bar, vec![1.0, 0.0]);
    }

    #[test]
    fn targets_correct_only_mode_drops_misl_label() {
        // Predicted Mis-L with the (w0, 0) weight choice: the target is the
        // plain average of the own network's weak predictions.
        let o = outcome("a", [0.1, 0.2, 0.7]);
        let own = vec![vec![0.25, 0.75], vec![0.35, 0.65]];
        let peer = vec![vec![0.9, 0.1], vec![0.9, 0.1]];
        let batch = build_targets(
            &[TargetInput {
                sample_id: "a",
                given_label: 0,
                outcome: &o,
                own_preds: &own,
                peer_preds: &peer,
            }],
            2,
            20,
            &ScheduleConfig {
                omega0: 0.1,
                total_epochs: 100,
                warmup_epochs: 10,
            },
            LabelingWeights::CorrectOnly,
        )
        .unwrap();
        let t = &batch.targets[0];
        assert_eq!(t.route, LossRoute::ReweighedCrossEntropy);
        assert_eq!(t.w_label, 0.0);
        assert!((t.y_bar[0] - 0.3).abs() < 1e-12);
        assert!((t.y_bar[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn route_multiset_matches_indicator_multiset() {
        let mut rng = crate::rng::derive_rng(16, &[0x32]);
        let outcomes: Vec<SeparationOutcome> = (0..60)
            .map(|i| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                outcome(&format!("s{i}"), [raw[0] / s, raw[1] / s, raw[2] / s])
            })
            .collect();
        let uniform = vec![vec![0.25; 4]; 2];
        let inputs: Vec<TargetInput> = outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| TargetInput {
                sample_id: &o.sample_id,
                given_label: i % 4,
                outcome: o,
                own_preds: &uniform,
                peer_preds: &uniform,
            })
            .collect();
        let batch = build_targets(
            &inputs,
            4,
            30,
            &ScheduleConfig {
                omega0: 0.1,
                total_epochs: 100,
                warmup_epochs: 10,
            },
            LabelingWeights::Combined,
        )
        .unwrap();

        for (t, o) in batch.targets.iter().zip(&outcomes) {
            assert_eq!(t.route, LossRoute::for_noise(o.noise_type()));
            let sum: f64 = t.y_bar.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(t.y_bar.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn desync_is_a_hard_failure() {
        let o = outcome("other", [1.0, 0.0, 0.0]);
        let preds = vec![vec![0.5, 0.5]];
        let err = build_targets(
            &[TargetInput {
                sample_id: "a",
                given_label: 0,
                outcome: &o,
                own_preds: &preds,
                peer_preds: &preds,
            }],
            2,
            10,
            &ScheduleConfig {
                omega0: 0.1,
                total_epochs: 100,
                warmup_epochs: 10,
            },
            LabelingWeights::Combined,
        );
        assert!(matches!(err, Err(QmixError::TrainingAborted(_))));
    }
}
