//! JSON-lines run record, one object per epoch.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub acc_si: f64,
    pub acc_ag: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_sd: Option<f64>,
    pub wall_ms_per_iter: f64,
}

pub fn append_record(path: impl AsRef<Path>, rec: &EpochRecord) -> Result<()> {
    let path = path.as_ref();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| SfeError::io(path, e))?;
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| SfeError::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| SfeError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SfeError::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut r = EpochRecord {
            epoch: 0,
            lr: 0.1,
            train_loss: 2.0,
            acc_si: 0.5,
            acc_ag: 0.25,
            acc_sd: None,
            wall_ms_per_iter: 3.0,
        };
        append_record(&p, &r).unwrap();
        r.epoch = 1;
        r.acc_sd = Some(0.75);
        append_record(&p, &r).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], r);
        let first = fs::read_to_string(&p).unwrap();
        assert!(!first.lines().next().unwrap().contains("acc_sd"));
    }
}
