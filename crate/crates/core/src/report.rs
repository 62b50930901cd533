//! Run reports: one JSON document per training run with per-epoch metrics
//! and final test figures.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::VariantKind;
use crate::error::{DeattError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_logloss: f64,
    pub test_logloss: f64,
    pub test_auc: f64,
    pub test_gauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub variant: VariantKind,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub final_test_auc: f64,
    pub final_test_gauc: f64,
    pub final_test_logloss: f64,
    /// Zero when the run is made in verification mode, where reports must be
    /// byte-identical across repeats.
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(DeattError::from)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}
