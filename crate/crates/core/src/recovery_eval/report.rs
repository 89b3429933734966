use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of grid steps between 0 and 1.
pub const GRID_STEPS: u32 = 100;

/// Reliability and outcome of one estimate.
pub trait Scored {
    fn reliability(&self) -> f64;
    fn accepted(&self) -> bool;
}

impl Scored for (f64, bool) {
    fn reliability(&self) -> f64 {
        self.0
    }
    fn accepted(&self) -> bool {
        self.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub n_success: usize,
    pub n_failure: usize,
    /// Absent when no estimate reaches the threshold.
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub rows: Vec<ThresholdRow>,
    pub minimal_safe_threshold: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    minimal_safe_threshold: Option<f64>,
    total_success: usize,
    total_failure: usize,
    grid_steps: usize,
    rows: &'a [ThresholdRow],
}

/// Counts successes and failures at or above each threshold `i / steps`.
pub fn threshold_report<T: Scored>(records: &[T], steps: u32) -> Result<ThresholdReport> {
    if records.is_empty() {
        return Err(Error::Empty("threshold report records"));
    }
    if steps == 0 {
        return Err(Error::OutOfRange {
            field: "grid_steps".into(),
            reason: "must be at least 1".into(),
        });
    }
    let rows: Vec<ThresholdRow> = (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            let (mut s, mut f) = (0, 0);
            for r in records.iter().filter(|r| r.reliability() >= t) {
                if r.accepted() {
                    s += 1;
                } else {
                    f += 1;
                }
            }
            ThresholdRow {
                threshold: t,
                n_success: s,
                n_failure: f,
                precision: (s + f > 0).then(|| s as f64 / (s + f) as f64),
            }
        })
        .collect();
    let minimal_safe_threshold = rows
        .iter()
        .find(|r| r.n_success >= 1 && r.n_failure == 0)
        .map(|r| r.threshold);
    Ok(ThresholdReport {
        rows,
        minimal_safe_threshold,
    })
}

impl ThresholdReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "n_success", "n_failure", "precision"])?;
        for r in &self.rows {
            w.write_record([
                format!("{:.2}", r.threshold),
                r.n_success.to_string(),
                r.n_failure.to_string(),
                r.precision.map(|p| format!("{p:.6}")).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let first = &self.rows[0];
        let s = Summary {
            minimal_safe_threshold: self.minimal_safe_threshold,
            total_success: first.n_success,
            total_failure: first.n_failure,
            grid_steps: self.rows.len() - 1,
            rows: &self.rows,
        };
        let text = serde_json::to_string_pretty(&s).map_err(|e| Error::json("threshold report", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
