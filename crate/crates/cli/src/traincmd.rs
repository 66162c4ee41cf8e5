//! `train`: run the optimization loop from a JSON config and a manifest.

use std::path::Path;
use uwnr_core::checkpoint::ModelCheckpoint;
use uwnr_core::data::Manifest;
use uwnr_core::trainer::{train, TrainConfig, TrainOutcome};
use uwnr_core::Result;

pub fn train_cmd(
    config_path: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<TrainOutcome> {
    let mut cfg = TrainConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.network.seed = seed;
    }
    let manifest = Manifest::load(manifest_path)?;
    let resume_ckpt = match resume {
        Some(p) => Some(ModelCheckpoint::load(p)?),
        None => None,
    };
    train(&manifest, &cfg, out_dir, resume_ckpt.as_ref())
}
