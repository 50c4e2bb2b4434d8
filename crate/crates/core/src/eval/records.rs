//! On-disk record schemas shared by the trainer (writer) and the reporting
//! tools (readers): the per-epoch metrics JSONL and the per-epoch separation
//! CSV.
//!
//! `metrics.jsonl` carries exactly the keys below and nothing non-deterministic
//! (wall times live in a separate timing file), so two runs with the same
//! config and seed produce byte-identical metrics files.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NoiseType, QmixError, Result};

/// One line of `metrics.jsonl`. AUC fields are `None` during warm-up epochs
/// (no separation has run yet) and in real-data mode (no ground truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_correct: f64,
    pub loss_mis_h: f64,
    pub loss_mis_l: f64,
    pub loss_con: f64,
    pub loss_reg: f64,
    pub kappa: f64,
    pub auc_correct: Option<f64>,
    pub auc_misl: Option<f64>,
}

/// One row of a separation log CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub epoch: usize,
    pub sample_id: String,
    pub class: usize,
    pub l: f64,
    pub e: f64,
    pub l_norm: f64,
    pub e_norm: f64,
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub indicator: usize,
    pub true_noise_type: Option<NoiseType>,
}

pub fn append_metrics_line(writer: &mut impl Write, metrics: &EpochMetrics) -> Result<()> {
    serde_json::to_writer(&mut *writer, metrics)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_separation_csv(path: &Path, rows: &[SeparationRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_separation_csv(path: &Path) -> Result<Vec<SeparationRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(csv_err)?);
    }
    Ok(out)
}

fn csv_err(err: csv::Error) -> QmixError {
    QmixError::Parse(format!("csv: {err}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separation_csv_round_trip() {
        let rows = vec![
            SeparationRow {
                epoch: 11,
                sample_id: "train-00042".into(),
                class: 3,
                l: 1.25,
                e: 0.5,
                l_norm: 0.75,
                e_norm: 0.25,
                w0: 0.9,
                w1: 0.05,
                w2: 0.05,
                indicator: 0,
                true_noise_type: Some(NoiseType::Correct),
            },
            SeparationRow {
                epoch: 11,
                sample_id: "train-00043".into(),
                class: 1,
                l: 3.0,
                e: 0.1,
                l_norm: 1.0,
                e_norm: 0.0,
                w0: 0.01,
                w1: 0.98,
                w2: 0.01,
                indicator: 1,
                true_noise_type: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sep.csv");
        write_separation_csv(&path, &rows).unwrap();
        let back = read_separation_csv(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn metrics_jsonl_round_trip() {
        let m = EpochMetrics {
            epoch: 5,
            loss_correct: 1.0,
            loss_mis_h: 0.5,
            loss_mis_l: 0.25,
            loss_con: 0.125,
            loss_reg: 0.0625,
            kappa: 0.8,
            auc_correct: Some(0.95),
            auc_misl: None,
        };
        let mut buf = Vec::new();
        append_metrics_line(&mut buf, &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        std::fs::write(&path, &buf).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, vec![m]);
    }
}
