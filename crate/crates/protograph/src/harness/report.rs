//! Run reports: per-episode JSON-lines records and summary CSV rows.
//!
//! Serialized artifacts carry no timing information, so identical runs
//! produce byte-identical files; wall-clock lives only in the in-memory
//! report for console output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub loss: f64,
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<EpisodeRecord>,
    pub mean_accuracy: f64,
    /// Standard deviation of accuracy across repeated runs, when this
    /// report aggregates several.
    pub accuracy_std: Option<f64>,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn from_records(records: Vec<EpisodeRecord>, wall_seconds: f64) -> Self {
        let correct = records.iter().filter(|r| r.correct).count();
        let mean_accuracy = if records.is_empty() {
            0.0
        } else {
            correct as f64 / records.len() as f64
        };
        RunReport { records, mean_accuracy, accuracy_std: None, wall_seconds }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.loss).sum::<f64>() / self.records.len() as f64
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<EpisodeRecord>, Error> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Run(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        Ok(records)
    }
}

/// One row of the run summary CSV.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub variant: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub mean_acc: f64,
    pub std: f64,
    pub episodes: usize,
    pub seed: u64,
}

pub const SUMMARY_HEADER: &str = "variant,n_way,k_shot,mean_acc,std,episodes,seed";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.n_way, r.k_shot, r.mean_acc, r.std, r.episodes, r.seed
        ));
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<(), Error> {
    std::fs::write(path, summary_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_recomputable_from_records() {
        let records = vec![
            EpisodeRecord { episode: 0, loss: 1.0, correct: true },
            EpisodeRecord { episode: 1, loss: 0.5, correct: false },
            EpisodeRecord { episode: 2, loss: 0.25, correct: true },
            EpisodeRecord { episode: 3, loss: 0.75, correct: true },
        ];
        let report = RunReport::from_records(records.clone(), 0.0);
        assert_eq!(report.mean_accuracy, 0.75);
        let again = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
        assert_eq!(report.mean_accuracy, again);
        assert!((0.0..=1.0).contains(&report.mean_accuracy));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let report = RunReport::from_records(
            vec![
                EpisodeRecord { episode: 0, loss: 1.0986122886681098, correct: false },
                EpisodeRecord { episode: 1, loss: 1e-9, correct: true },
            ],
            1.0,
        );
        report.write_jsonl(&p).unwrap();
        let back = RunReport::read_jsonl(&p).unwrap();
        assert_eq!(back, report.records);
    }

    #[test]
    fn summary_has_expected_columns() {
        let rows = vec![SummaryRow {
            variant: "GCN(dense)+pro-point".into(),
            n_way: 3,
            k_shot: 5,
            mean_acc: 0.9,
            std: 0.01,
            episodes: 300,
            seed: 7,
        }];
        let text = summary_csv(&rows);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SUMMARY_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("GCN(dense)+pro-point,3,5,0.9,0.01,300,7"));
    }
}
