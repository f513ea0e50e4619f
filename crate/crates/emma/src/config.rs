//! Run configuration: one JSON document fully determines a training run.
//! Validation happens up front, before any data is read or any compute
//! starts, and unknown keys anywhere in the document are rejected.

use crate::arch::ArchitectureSpec;
use crate::builders::build_architecture;
use crate::error::{EmmaError, Result};
use crate::fsio;
use crate::losses::LossSpec;
use crate::optim::{Optimizer, OptimizerSpec};
use crate::preprocess::NormalizationSpec;
use crate::sampling::{PatchGeometry, SamplingSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub architecture: ArchitectureSpec,
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub sampling: SamplingSpec,
    pub normalization: NormalizationSpec,
    pub batch_size: usize,
    pub iterations: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Directory holding `<case>.emv` volumes and `<case>.seg.emv` labels.
    pub data_dir: PathBuf,
    pub train_cases: Vec<String>,
    pub output_dir: PathBuf,
}

fn default_log_every() -> u64 {
    50
}

fn default_checkpoint_every() -> u64 {
    500
}

impl RunConfig {
    /// Field and cross-field checks. Building the network here is cheap and
    /// catches architecture/sampling mismatches before any work happens.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.loss.validate(self.architecture.class_count)?;
        Optimizer::new(&self.optimizer)?;
        if self.batch_size == 0 {
            return Err(EmmaError::Config("batch_size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(EmmaError::Config("iterations must be at least 1".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(EmmaError::Config("log_every and checkpoint_every must be positive".into()));
        }
        if self.train_cases.is_empty() {
            return Err(EmmaError::Config("train_cases lists no cases".into()));
        }
        if self.normalization.needs_landmarks() && self.normalization.landmarks.is_none() {
            return Err(EmmaError::Config(
                "the configured normalization needs a landmarks file but none is listed".into(),
            ));
        }
        let network = build_architecture(&self.architecture)?;
        PatchGeometry::for_network(&network, self.sampling.patch_extent)?;
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let config: RunConfig = serde_json::from_slice(bytes)
            .map_err(|e| EmmaError::Config(format!("invalid run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsio::read_bytes(path)?;
        Self::from_json(&bytes).map_err(|e| match e {
            EmmaError::Config(m) => EmmaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }
}
