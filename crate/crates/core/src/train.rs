//! Bookkeeping shared by the training loops.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Writes the `step,loss,lr` training curve.
pub fn write_loss_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "lr"])?;
    for r in records {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub(crate) fn write_string(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let recs: Vec<StepRecord> =
            (1..=3).map(|i| StepRecord { step: i, loss: 1.0 / i as f64, lr: 0.03, grad_norm: 1.0 }).collect();
        write_loss_csv(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss,lr\n"));
        let back = read_loss_csv(&path).unwrap();
        assert_eq!(back[2], (3, 1.0 / 3.0, 0.03));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
