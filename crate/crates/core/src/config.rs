//! Experiment configuration: one JSON document covering data, model,
//! codebook, collapse, fusion and training sections. Unknown keys are
//! rejected so typos fail loudly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collapse::ThresholdMode;
use crate::datagen::GenConfig;
use crate::error::{DeattError, Result};
use crate::fusion::FusionMode;
use crate::matrix::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Transformer,
    TransformerNoDiag,
    ComboOnly,
    CollapseOnly,
    Dual,
}

impl VariantKind {
    pub fn table_name(self) -> &'static str {
        match self {
            VariantKind::Transformer => "Transformer",
            VariantKind::TransformerNoDiag => "Transformer w/o diag",
            VariantKind::ComboOnly => "Combo-ID Attention",
            VariantKind::CollapseOnly => "Collapse-Avoiding Attention",
            VariantKind::Dual => "Dual Enhanced Attention",
        }
    }

    pub fn uses_codebook(self) -> bool {
        matches!(self, VariantKind::ComboOnly | VariantKind::Dual)
    }

    pub fn uses_threshold(self) -> bool {
        matches!(self, VariantKind::CollapseOnly | VariantKind::Dual)
    }

    pub fn masks_diagonal(self) -> bool {
        !matches!(self, VariantKind::Transformer)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_path: String,
    pub test_path: String,
    pub n_fields: usize,
    /// Per-field embedding hash-table rows; one entry broadcasts.
    pub embedding_buckets: Vec<u64>,
}

fn default_layers() -> usize {
    1
}
fn default_d() -> usize {
    16
}
fn default_dnn() -> Vec<usize> {
    vec![64, 32]
}
fn default_true() -> bool {
    true
}
fn default_hidden() -> Option<usize> {
    None
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_ema_decay() -> f64 {
    0.99
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantKind,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Hidden widths of the DNN head; the final single-logit layer is implied.
    #[serde(default = "default_dnn")]
    pub dnn_widths: Vec<usize>,
    /// Gated-siamese-codebook toggle: when off only the main codebook is
    /// allocated (no collision gating).
    #[serde(default = "default_true")]
    pub gsc_enabled: bool,
    /// Learned Q/K/V projections for comparison; off keeps the identity of
    /// the input layer.
    #[serde(default)]
    pub qkv_projection: bool,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub layer_norm: bool,
    /// Literal diagonal zeroing instead of sentinel masking.
    #[serde(default, rename = "diag_literal_zero")]
    pub diag_literal_zero: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSection {
    pub size: usize,
    pub k_siamese: usize,
    #[serde(default = "default_true")]
    pub shared_across_layers: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComboSection {
    /// Hidden width h of the re-weight subnet; defaults to 2*d.
    pub hidden_h: Option<usize>,
    pub activation: Activation,
}

impl Default for ComboSection {
    fn default() -> Self {
        ComboSection {
            hidden_h: default_hidden(),
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseSection {
    pub mode: ThresholdMode,
    pub ema_decay: f64,
    pub scale: bool,
    pub include_diag_in_mean: bool,
}

impl Default for CollapseSection {
    fn default() -> Self {
        CollapseSection {
            mode: ThresholdMode::Scores,
            ema_decay: default_ema_decay(),
            scale: true,
            include_diag_in_mean: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub mode: FusionMode,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            mode: FusionMode::WeightedSum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub codebook: CodebookSection,
    #[serde(default)]
    pub combo: ComboSection,
    #[serde(default)]
    pub collapse: CollapseSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Optional synthetic-data section consumed by the `gen` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenConfig>,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| DeattError::Config {
                key: "<document>".into(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| DeattError::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| {
            Err(DeattError::Config {
                key: key.into(),
                message,
            })
        };
        if self.model.d == 0 {
            return err("model.d", "must be >= 1".into());
        }
        if self.model.layers == 0 {
            return err("model.layers", "must be >= 1".into());
        }
        if self.data.n_fields < 2 {
            return err("data.n_fields", "need at least 2 fields".into());
        }
        match self.data.embedding_buckets.len() {
            1 => {}
            n if n == self.data.n_fields => {}
            n => {
                return err(
                    "data.embedding_buckets",
                    format!("{n} entries for {} fields", self.data.n_fields),
                )
            }
        }
        if self.data.embedding_buckets.contains(&0) {
            return err("data.embedding_buckets", "buckets must be >= 1".into());
        }
        if self.codebook.size == 0 {
            return err("codebook.size", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.collapse.ema_decay) {
            return err("collapse.ema_decay", "must lie in (0,1)".into());
        }
        if self.train.batch_size == 0 {
            return err("train.batch_size", "must be >= 1".into());
        }
        if self.train.epochs == 0 {
            return err("train.epochs", "must be >= 1".into());
        }
        if let Some(gen) = &self.gen {
            gen.validate().map_err(|e| DeattError::Config {
                key: "gen".into(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn buckets_for_field(&self, field: usize) -> u64 {
        if self.data.embedding_buckets.len() == 1 {
            self.data.embedding_buckets[0]
        } else {
            self.data.embedding_buckets[field]
        }
    }

    pub fn combo_hidden(&self) -> usize {
        self.combo.hidden_h.unwrap_or(2 * self.model.d)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Small in-memory config shared by model/train unit tests.
    pub(crate) fn toy_config(variant: VariantKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_json(&super::tests::toy_config_json()).unwrap();
        cfg.model.variant = variant;
        cfg
    }
}
