use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

use super::ValMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training losses over the epoch's steps.
    pub train: LossBreakdown,
    pub val: ValMetrics,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    best_epoch: usize,
}

/// Per-epoch history of a run.
///
/// Wall-clock durations are kept apart from the JSON-lines log so that logs of
/// identical runs compare byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }

    /// One JSON object per epoch, then `{"best_epoch": k}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("records serialize"));
            out.push('\n');
        }
        let summary = Summary {
            best_epoch: self.best_epoch,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, body) = lines
            .split_last()
            .ok_or_else(|| Error::Data("empty training log".into()))?;
        let parse_err = |i: usize, e: serde_json::Error| Error::Data(format!("training log line {}: {e}", i + 1));
        let epochs = body
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i, e)))
            .collect::<Result<Vec<EpochRecord>>>()?;
        let summary: Summary = serde_json::from_str(last).map_err(|e| parse_err(body.len(), e))?;
        if summary.best_epoch >= epochs.len() {
            return Err(Error::Data(format!(
                "best epoch {} outside a log of {} epochs",
                summary.best_epoch,
                epochs.len()
            )));
        }
        Ok(Self {
            epochs,
            best_epoch: summary.best_epoch,
            epoch_seconds: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Epoch durations as JSON lines `{"epoch": t, "seconds": s}`.
    pub fn timings_jsonl(&self) -> String {
        self.epoch_seconds
            .iter()
            .enumerate()
            .map(|(epoch, s)| format!("{}\n", serde_json::json!({ "epoch": epoch, "seconds": s })))
            .collect()
    }
}
