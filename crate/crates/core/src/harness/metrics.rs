//! Metrics emission: a flat CSV of per-epoch per-rank rows plus a JSON run
//! summary. Output is byte-deterministic for a given config and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to emit")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("summary serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub const CSV_HEADER: &str = "epoch,mode,rank,rt,compute_t,comm_t,flops,gamma,beta,lambda,loss,acc";

/// One per-epoch per-rank metrics record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub mode: String,
    pub rank: usize,
    /// Epoch runtime: the slowest rank's virtual-clock delta.
    pub rt: f64,
    pub compute_t: f64,
    pub comm_t: f64,
    pub flops: u64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda: usize,
    pub loss: f64,
    pub acc: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mode,
            self.rank,
            self.rt,
            self.compute_t,
            self.comm_t,
            self.flops,
            self.gamma,
            self.beta,
            self.lambda,
            self.loss,
            self.acc
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<MetricsRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return None;
        }
        Some(MetricsRow {
            epoch: f[0].parse().ok()?,
            mode: f[1].to_string(),
            rank: f[2].parse().ok()?,
            rt: f[3].parse().ok()?,
            compute_t: f[4].parse().ok()?,
            comm_t: f[5].parse().ok()?,
            flops: f[6].parse().ok()?,
            gamma: f[7].parse().ok()?,
            beta: f[8].parse().ok()?,
            lambda: f[9].parse().ok()?,
            loss: f[10].parse().ok()?,
            acc: f[11].parse().ok()?,
        })
    }
}

/// Render rows as CSV text (header plus one line per record).
pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Parse CSV text back into rows (inverse of [`rows_to_csv`]).
pub fn rows_from_csv(text: &str) -> Vec<MetricsRow> {
    text.lines()
        .skip(1)
        .filter_map(MetricsRow::parse_csv_line)
        .collect()
}

/// Aggregate counters for the mode invariants.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModeAudit {
    pub prunes: u64,
    pub imputations: u64,
    pub migrated_matmuls: u64,
    pub stat_refreshes: u64,
    pub all_reduces_per_iteration: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub rt: f64,
    pub loss: f64,
    pub acc: f64,
    pub lambda: usize,
    /// Concurrent straggler count scheduled this epoch.
    pub nu: usize,
    /// Per-rank uniform pruning ratios in effect at epoch end.
    pub gammas: Vec<f64>,
}

/// Run summary: config echo, per-epoch rollups and the audit counters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub total_rt: f64,
    pub final_acc: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochSummary>,
    pub mode_audit: ModeAudit,
}

/// Write `metrics.csv` and `summary.json` under `dir`. Errors on empty input
/// or unwritable paths; returns the two file paths.
pub fn emit_metrics(
    rows: &[MetricsRow],
    summary: &RunSummary,
    dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf), MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let csv_path = dir.join("metrics.csv");
    let json_path = dir.join("summary.json");
    let write = |path: &PathBuf, data: &str| -> Result<(), MetricsError> {
        let mut f = std::fs::File::create(path).map_err(|source| MetricsError::Io {
            path: path.clone(),
            source,
        })?;
        f.write_all(data.as_bytes()).map_err(|source| MetricsError::Io {
            path: path.clone(),
            source,
        })
    };
    write(&csv_path, &rows_to_csv(rows))?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    write(&json_path, &json)?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> MetricsRow {
        MetricsRow {
            epoch: 3,
            mode: "semi".into(),
            rank: 2,
            rt: 123.456,
            compute_t: 100.0,
            comm_t: 23.456,
            flops: 987654,
            gamma: 0.3125,
            beta: 0.25,
            lambda: 1,
            loss: 1.0986122886681098,
            acc: 0.75,
        }
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![sample_row()];
        let text = rows_to_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        let back = rows_from_csv(&text);
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_records_error() {
        let summary = RunSummary {
            config: crate::harness::config::load_config_str(
                r#"{"model":{"depth":1,"hs":4,"bs":1,"sql":1,"e":1,"lr":0.1,"classes":2},
                    "mode":"baseline","epochs":1,"iterations":1,"seed":1}"#,
            )
            .unwrap(),
            total_rt: 0.0,
            final_acc: 0.0,
            final_loss: 0.0,
            epochs: vec![],
            mode_audit: ModeAudit {
                prunes: 0,
                imputations: 0,
                migrated_matmuls: 0,
                stat_refreshes: 0,
                all_reduces_per_iteration: 0,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_metrics(&[], &summary, dir.path()),
            Err(MetricsError::Empty)
        ));
    }
}
