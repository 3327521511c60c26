//! The `run.json` written next to every artifact.

use std::path::Path;

use dist_core::train::EpochMetrics;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

impl From<&EpochMetrics> for MetricRow {
    fn from(m: &EpochMetrics) -> Self {
        MetricRow { epoch: m.epoch, split: m.split.clone(), loss: m.loss, acc: m.acc }
    }
}

/// Everything needed to reproduce and audit one command. Re-running
/// `config` with `seed` reproduces `weights_hash` and `metrics` exactly;
/// only `wall_clock_secs` varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// INI snapshot of the resolved configuration.
    pub config: String,
    pub seed: u64,
    /// Content hash of the weights archive the command wrote or read.
    pub weights_hash: String,
    /// Content hash of the spatial encoder weights.
    pub spatial_hash: String,
    pub metrics: Vec<MetricRow>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}
