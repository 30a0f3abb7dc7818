//! The run configuration: one JSON document that seeds and parameterizes
//! every command. Unknown keys are rejected, defaults are the documented
//! artifact defaults, and the sha-256 digest of the canonical serialized
//! form is stamped into every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{PartitionSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::TrainConfig;
use crate::retrieval::Variant;
use crate::rng::derive_seed;

/// Seed streams derived from the root seed.
pub const SEED_STREAM_SYNTH: u64 = 0;
pub const SEED_STREAM_TRAIN: u64 = 1;
pub const SEED_STREAM_GRADCHECK: u64 = 2;

/// Synthetic-generator settings without a seed; the root seed derives it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub corrupt_prob: f64,
    pub train_identities: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_identities: 16,
            images_per_identity: 12,
            rows: 24,
            cols: 8,
            dim: 32,
            noise_sigma: 0.1,
            corrupt_prob: 0.0,
            train_identities: None,
        }
    }
}

/// Training settings without a seed; the root seed derives it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gcn: f64,
    pub lr_head: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            epochs: base.epochs,
            batch_size: base.batch_size,
            lr_gcn: base.lr_gcn,
            lr_head: base.lr_head,
            decay_epoch: base.decay_epoch,
            decay_factor: base.decay_factor,
            momentum: base.momentum,
        }
    }
}

/// The unified run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub levels: Vec<u32>,
    pub synth: SynthSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub variant: Variant,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition_spec()?;
        self.synth_config().validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Sha-256 of the canonical serialized form, lowercase hex.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn partition_spec(&self) -> Result<PartitionSpec> {
        if self.levels.is_empty() {
            return Ok(PartitionSpec::default());
        }
        PartitionSpec::new(self.levels.clone())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_identities: self.synth.n_identities,
            images_per_identity: self.synth.images_per_identity,
            rows: self.synth.rows,
            cols: self.synth.cols,
            dim: self.synth.dim,
            noise_sigma: self.synth.noise_sigma,
            corrupt_prob: self.synth.corrupt_prob,
            seed: derive_seed(self.seed, SEED_STREAM_SYNTH),
            train_identities: self.synth.train_identities,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_gcn: self.train.lr_gcn,
            lr_head: self.train.lr_head,
            decay_epoch: self.train.decay_epoch,
            decay_factor: self.train.decay_factor,
            momentum: self.train.momentum,
            seed: derive_seed(self.seed, SEED_STREAM_TRAIN),
        }
    }

    /// Seed for the gradient-check instance.
    pub fn gradcheck_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_STREAM_GRADCHECK)
    }
}
