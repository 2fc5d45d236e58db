//! Experiment configuration: one JSON document with model, loss, optim,
//! data, train, and cascade sections. Unknown keys are rejected so typos
//! cannot silently change a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::ModelConfig;
use crate::optim::OptimizerConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding train.json / val.json / test.json manifests.
    pub manifest_dir: PathBuf,
    /// Frames per clip window.
    #[serde(default = "default_t")]
    pub t: usize,
    /// Windows per batch.
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_t() -> usize {
    5
}
fn default_n() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    /// Skip the conversion + recurrent training step entirely.
    #[serde(default)]
    pub step1_only: bool,
    /// Start step 2 from this baseline checkpoint instead of training
    /// step 1 here.
    #[serde(default)]
    pub step1_checkpoint: Option<std::path::PathBuf>,
    #[serde(default = "default_true")]
    pub peephole: bool,
    #[serde(default = "default_true")]
    pub seed_from_classifier: bool,
    /// Which step-2 weights to keep: the highest-validation-mIoU epoch
    /// (the paper's rule) or the final state of a fixed budget.
    #[serde(default)]
    pub retain: Retain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retain {
    #[default]
    Best,
    Final,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimizerConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub cascade: Option<CascadeConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.data.t == 0 || self.data.n == 0 {
            return Err(Error::Config("data.t and data.n must be >= 1".to_string()));
        }
        if self.train.step1_epochs == 0 {
            return Err(Error::Config("train.step1_epochs must be >= 1".to_string()));
        }
        if !self.train.step1_only && self.train.step2_epochs == 0 {
            return Err(Error::Config("train.step2_epochs must be >= 1 unless step1_only".to_string()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
