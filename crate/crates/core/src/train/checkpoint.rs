//! Checkpoint bundles: trainable parameters, optimizer state, the resolved
//! config and a reference to the frozen encoder weights.
//!
//! ```text
//! <dir>/trainable.safetensors   adapter.*, local.*, fusion.*, loss_weights.*
//! <dir>/optimizer.safetensors   m.*, v.*, t.*
//! <dir>/config.toml             resolved configuration
//! <dir>/bundle.json             BundleMeta
//! ```

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::config::DfaConfig;
use crate::encoder::ENCODER_PREFIX;
use crate::error::{DfaError, Result};
use crate::model::{build_encoder, Dfa, EncoderRef};
use crate::params::{load_map, save_map};
use crate::train::adam::Adam;

pub const TRAINABLE_FILE: &str = "trainable.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const CONFIG_FILE: &str = "config.toml";
pub const META_FILE: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub epoch: usize,
    pub step: usize,
    pub config_hash: String,
    pub encoder: EncoderRef,
    pub val_auc: Option<f64>,
}

pub fn save_bundle(dir: &Path, model: &Dfa, opt: &Adam, meta: &BundleMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DfaError::io(dir, e))?;
    let params = model.vars().to_map();
    if let Some(bad) = params.keys().find(|k| k.starts_with(ENCODER_PREFIX)) {
        return Err(DfaError::Data(format!("refusing to store frozen parameter `{bad}`")));
    }
    save_map(dir.join(TRAINABLE_FILE), &params)?;
    save_map(dir.join(OPTIMIZER_FILE), &opt.state_map()?)?;
    let cfg = model.config().to_toml_string()?;
    let p = dir.join(CONFIG_FILE);
    std::fs::write(&p, cfg).map_err(|e| DfaError::io(&p, e))?;
    let p = dir.join(META_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| DfaError::io(&p, e))?;
    Ok(())
}

pub struct LoadedBundle {
    pub model: Dfa,
    pub optimizer: Adam,
    pub meta: BundleMeta,
}

/// Rebuilds the model from a bundle. The encoder is re-created from the
/// stored reference; a checkpoint whose hash changed is rejected.
pub fn load_bundle(dir: &Path) -> Result<LoadedBundle> {
    let p = dir.join(META_FILE);
    let meta: BundleMeta =
        serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| DfaError::io(&p, e))?)?;
    let cfg = DfaConfig::load(dir.join(CONFIG_FILE))?;
    if cfg.hash()? != meta.config_hash {
        return Err(DfaError::Data(format!("{}: config hash does not match bundle metadata", dir.display())));
    }
    let (encoder, enc_ref) = build_encoder(&cfg, &Device::Cpu)?;
    if enc_ref != meta.encoder {
        return Err(DfaError::Data(format!(
            "encoder reference changed: bundle {:?}, found {:?}",
            meta.encoder, enc_ref
        )));
    }
    let model = Dfa::new(&cfg, encoder)?;
    model.vars().assign_from(&load_map(dir.join(TRAINABLE_FILE), &Device::Cpu)?)?;
    let mut optimizer = Adam::new(cfg.train.lr);
    optimizer.load_state(&load_map(dir.join(OPTIMIZER_FILE), &Device::Cpu)?, model.vars().vars())?;
    Ok(LoadedBundle { model, optimizer, meta })
}
