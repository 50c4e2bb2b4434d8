//! Best/Last reporting and separation-AUC summaries over a run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::records::{read_metrics, read_separation_csv, SeparationRow};
use crate::eval::roc_auc;
use crate::trainer::rundir;
use crate::trainer::NetId;
use crate::{NoiseType, QmixError, Result};

/// How many final epochs the Last metric averages over.
pub const LAST_WINDOW: usize = 10;

/// Per-epoch separation quality. `None` when ground truth is missing
/// (real-data mode) or one of the two classes is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSeparationAuc {
    pub epoch: usize,
    pub auc_correct: Option<f64>,
    pub auc_misl: Option<f64>,
}

/// Final run summary serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: usize,
    /// Maximum test kappa over all evaluated epochs (first epoch on ties).
    pub best_kappa: f64,
    pub best_epoch: usize,
    /// Mean test kappa over the final `last_window` epochs.
    pub last_kappa: f64,
    pub last_window: usize,
    /// Set when fewer than [`LAST_WINDOW`] epochs were available.
    pub last_window_short: bool,
    pub final_auc_correct: Option<f64>,
    pub final_auc_misl: Option<f64>,
}

/// Computes per-epoch (auc_correct, auc_misl) from separation log rows.
///
/// auc_correct scores with the Correct posterior w0 against ground-truth
/// Correct; auc_misl scores with the Mis-L posterior w2 against ground-truth
/// Mis-L. Epochs lacking ground-truth annotations are reported with `None`.
pub fn separation_aucs(rows: &[SeparationRow]) -> Vec<EpochSeparationAuc> {
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();

    epochs
        .into_iter()
        .map(|epoch| {
            let group: Vec<&SeparationRow> = rows.iter().filter(|r| r.epoch == epoch).collect();
            if group.iter().any(|r| r.true_noise_type.is_none()) {
                log::warn!("epoch {epoch}: missing ground-truth noise types; AUC skipped");
                return EpochSeparationAuc {
                    epoch,
                    auc_correct: None,
                    auc_misl: None,
                };
            }
            let auc_for = |score: fn(&SeparationRow) -> f64, positive: NoiseType| {
                let scores: Vec<f64> = group.iter().map(|r| score(r)).collect();
                let positives: Vec<bool> = group
                    .iter()
                    .map(|r| r.true_noise_type == Some(positive))
                    .collect();
                roc_auc(&scores, &positives).ok()
            };
            EpochSeparationAuc {
                epoch,
                auc_correct: auc_for(|r| r.w0, NoiseType::Correct),
                auc_misl: auc_for(|r| r.w2, NoiseType::MisL),
            }
        })
        .collect()
}

/// Reads metrics and separation logs from a run directory and computes the
/// Best/Last summary. Works on partial runs.
pub fn final_report(run_dir: &Path) -> Result<RunReport> {
    let mut metrics = read_metrics(&rundir::metrics_path(run_dir))?;
    if metrics.is_empty() {
        return Err(QmixError::invalid("run directory has no metrics"));
    }
    metrics.sort_by_key(|m| m.epoch);

    let (best_epoch, best_kappa) = metrics
        .iter()
        .map(|m| (m.epoch, m.kappa))
        .fold((metrics[0].epoch, f64::NEG_INFINITY), |acc, (e, k)| {
            if k > acc.1 {
                (e, k)
            } else {
                acc
            }
        });

    let window = LAST_WINDOW.min(metrics.len());
    let short = window < LAST_WINDOW;
    if short {
        log::warn!(
            "fewer than {LAST_WINDOW} epochs available; Last averages over {window} epochs"
        );
    }
    let tail = &metrics[metrics.len() - window..];
    let last_kappa = tail.iter().map(|m| m.kappa).sum::<f64>() / window as f64;

    let last = metrics.last().unwrap();
    Ok(RunReport {
        epochs: metrics.len(),
        best_kappa,
        best_epoch,
        last_kappa,
        last_window: window,
        last_window_short: short,
        final_auc_correct: last.auc_correct,
        final_auc_misl: last.auc_misl,
    })
}

/// Regenerates `report.json` plus plot exports (kappa/AUC trajectory CSV and
/// per-epoch scatter tables) inside the run directory. Deterministic: the
/// same run directory always produces identical bytes.
pub fn write_report(run_dir: &Path) -> Result<RunReport> {
    let report = final_report(run_dir)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(rundir::report_path(run_dir), json.as_bytes())?;

    let export_dir = rundir::report_export_dir(run_dir);
    std::fs::create_dir_all(&export_dir)?;

    let metrics = read_metrics(&rundir::metrics_path(run_dir))?;
    let mut trajectory = String::from("epoch,kappa,auc_correct,auc_misl\n");
    for m in &metrics {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        trajectory.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch,
            m.kappa,
            fmt(m.auc_correct),
            fmt(m.auc_misl)
        ));
    }
    std::fs::write(export_dir.join("trajectory.csv"), trajectory.as_bytes())?;

    let scatter_dir = export_dir.join("scatter");
    std::fs::create_dir_all(&scatter_dir)?;
    for (epoch, path) in rundir::list_separation_csvs(run_dir, NetId::A)? {
        let rows = read_separation_csv(&path)?;
        let mut table = String::from("l_norm,e_norm,indicator,true_noise_type\n");
        for r in &rows {
            table.push_str(&format!(
                "{},{},{},{}\n",
                r.l_norm,
                r.e_norm,
                r.indicator,
                r.true_noise_type.map(|t| t.as_str()).unwrap_or("")
            ));
        }
        std::fs::write(scatter_dir.join(format!("epoch_{epoch:04}.csv")), table)?;
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::records::{append_metrics_line, EpochMetrics};

    fn fake_metrics(kappas: &[f64]) -> Vec<EpochMetrics> {
        kappas
            .iter()
            .enumerate()
            .map(|(i, &k)| EpochMetrics {
                epoch: i,
                loss_correct: 0.0,
                loss_mis_h: 0.0,
                loss_mis_l: 0.0,
                loss_con: 0.0,
                loss_reg: 0.0,
                kappa: k,
                auc_correct: Some(0.9),
                auc_misl: Some(0.8),
            })
            .collect()
    }

    fn write_run(dir: &Path, metrics: &[EpochMetrics]) {
        let mut buf = Vec::new();
        for m in metrics {
            append_metrics_line(&mut buf, m).unwrap();
        }
        std::fs::write(rundir::metrics_path(dir), buf).unwrap();
        std::fs::create_dir_all(rundir::separation_dir(dir)).unwrap();
    }

    #[test]
    fn best_is_final_epoch_for_monotone_run() {
        let dir = tempfile::tempdir().unwrap();
        let kappas: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        write_run(dir.path(), &fake_metrics(&kappas));
        let report = final_report(dir.path()).unwrap();
        assert_eq!(report.best_epoch, 19);
        assert!((report.best_kappa - 19.0 / 20.0).abs() < 1e-12);
        // Last = mean of epochs 10..19.
        let expect: f64 = (10..20).map(|i| i as f64 / 20.0).sum::<f64>() / 10.0;
        assert!((report.last_kappa - expect).abs() < 1e-12);
        assert!(!report.last_window_short);
    }

    #[test]
    fn last_over_exactly_ten_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let kappas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        write_run(dir.path(), &fake_metrics(&kappas));
        let report = final_report(dir.path()).unwrap();
        assert!((report.last_kappa - 0.55).abs() < 1e-12);
        assert_eq!(report.last_window, 10);
        assert!(!report.last_window_short);
    }

    #[test]
    fn short_tail_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &fake_metrics(&[0.2, 0.4, 0.6]));
        let report = final_report(dir.path()).unwrap();
        assert!(report.last_window_short);
        assert_eq!(report.last_window, 3);
        assert!((report.last_kappa - 0.4).abs() < 1e-12);
    }

    #[test]
    fn best_last_match_hand_computed_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let kappas = [0.1, 0.9, 0.3, 0.5, 0.2, 0.6, 0.55, 0.58, 0.61, 0.60, 0.59, 0.62];
        write_run(dir.path(), &fake_metrics(&kappas));
        let report = final_report(dir.path()).unwrap();
        assert_eq!(report.best_epoch, 1);
        assert!((report.best_kappa - 0.9).abs() < 1e-12);
        let expect: f64 = kappas[2..].iter().sum::<f64>() / 10.0;
        assert!((report.last_kappa - expect).abs() < 1e-12);
    }

    #[test]
    fn separation_aucs_one_hot_posteriors() {
        let mk = |id: usize, t: NoiseType| {
            let (w0, w1, w2) = match t {
                NoiseType::Correct => (1.0, 0.0, 0.0),
                NoiseType::MisH => (0.0, 1.0, 0.0),
                NoiseType::MisL => (0.0, 0.0, 1.0),
            };
            SeparationRow {
                epoch: 4,
                sample_id: format!("s{id}"),
                class: 0,
                l: 0.0,
                e: 0.0,
                l_norm: 0.0,
                e_norm: 0.0,
                w0,
                w1,
                w2,
                indicator: t.index(),
                true_noise_type: Some(t),
            }
        };
        let rows: Vec<SeparationRow> = (0..30)
            .map(|i| {
                mk(
                    i,
                    match i % 3 {
                        0 => NoiseType::Correct,
                        1 => NoiseType::MisH,
                        _ => NoiseType::MisL,
                    },
                )
            })
            .collect();
        let aucs = separation_aucs(&rows);
        assert_eq!(aucs.len(), 1);
        assert_eq!(aucs[0].auc_correct, Some(1.0));
        assert_eq!(aucs[0].auc_misl, Some(1.0));
    }

    #[test]
    fn separation_aucs_skip_without_ground_truth() {
        let rows = vec![SeparationRow {
            epoch: 2,
            sample_id: "a".into(),
            class: 0,
            l: 0.0,
            e: 0.0,
            l_norm: 0.0,
            e_norm: 0.0,
            w0: 1.0,
            w1: 0.0,
            w2: 0.0,
            indicator: 0,
            true_noise_type: None,
        }];
        let aucs = separation_aucs(&rows);
        assert_eq!(aucs[0].auc_correct, None);
        assert_eq!(aucs[0].auc_misl, None);
    }
}
