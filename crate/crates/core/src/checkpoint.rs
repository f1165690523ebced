//! Model checkpoints: parameters, running batch-norm statistics, the model
//! layout and the hash of the run configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{ensure, Result};
use crate::model::{AdaFusionNet, ModelConfig};
use crate::nn::ParamEntry;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADAFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub param_entries: Vec<ParamEntry>,
    pub params: Vec<f64>,
    pub buffer_entries: Vec<ParamEntry>,
    pub buffers: Vec<f64>,
    pub config_hash: String,
    /// Training step at which the snapshot was taken.
    pub step: u64,
    /// Validation AR@1 at that step, if evaluated.
    pub val_ar1: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(net: &AdaFusionNet, config_hash: &str, step: u64, val_ar1: Option<f64>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model: net.config().clone(),
            param_entries: net.params().entries().to_vec(),
            params: net.params().values().to_vec(),
            buffer_entries: net.buffers().entries().to_vec(),
            buffers: net.buffers().values().to_vec(),
            config_hash: config_hash.to_string(),
            step,
            val_ar1,
        }
    }

    /// Rebuilds the network; fails if the stored layout does not match the
    /// layout implied by the stored model configuration.
    pub fn to_model(&self) -> Result<AdaFusionNet> {
        let mut net = AdaFusionNet::new(self.model.clone(), 0)?;
        ensure!(
            net.params().entries() == self.param_entries.as_slice() && net.buffers().entries() == self.buffer_entries.as_slice(),
            Format,
            "checkpoint parameter layout does not match its model configuration"
        );
        net.load_state(&self.params, &self.buffers)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        archive::read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        archive::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        archive::decode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes)
    }

    /// Short content hash identifying this checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }
}
