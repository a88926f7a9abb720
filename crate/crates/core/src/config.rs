//! Run configuration: one TOML document mirroring every module config.
//!
//! Overrides are `key=value` pairs. `key` is either a dotted path
//! (`train.lr`) or a bare leaf name that is unique across the document
//! (`seed`). Values are parsed as TOML literals, falling back to strings.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::encoder::EncoderConfig;
use crate::error::{DfaError, Result};
use crate::fusion::FusionConfig;
use crate::local::LocalConfig;
use crate::metrics::Aggregation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Where the frozen encoder weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    /// Safetensors file with encoder weights (published or internal
    /// names). Seeded reference weights are used when absent.
    #[serde(default)]
    pub encoder_checkpoint: Option<String>,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "f32_precision")]
    pub precision: Precision,
}

fn f32_precision() -> Precision {
    Precision::F32
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            encoder_checkpoint: None,
            init_seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub global_on: bool,
    pub local_on: bool,
    pub ifc_on: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        global_on: true,
        local_on: true,
        ifc_on: true,
    };

    /// The three single-module ablations followed by the full model.
    pub fn table_patterns() -> [Ablation; 4] {
        [
            Ablation {
                global_on: false,
                ..Ablation::FULL
            },
            Ablation {
                local_on: false,
                ..Ablation::FULL
            },
            Ablation {
                ifc_on: false,
                ..Ablation::FULL
            },
            Ablation::FULL,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.global_on && !self.local_on {
            return Err(DfaError::Config("at least one of global_on/local_on must be true".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stops training after this many optimizer steps; 0 means no cap.
    #[serde(default)]
    pub max_steps: usize,
    #[serde(default)]
    pub ablation: Ablation,
    /// Split used for per-epoch validation and for ablation scoring.
    #[serde(default = "val_split")]
    pub eval_split: String,
}

fn val_split() -> String {
    "val".into()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-6,
            batch_size: 32,
            epochs: 6,
            seed: 706,
            max_steps: 0,
            ablation: Ablation::FULL,
            eval_split: val_split(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// A fixed number of uniformly spaced frames per video.
    Count,
    /// Every `frame_stride`-th frame.
    Stride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of the preprocessed sample store.
    #[serde(default)]
    pub manifest: Option<String>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub store_size: usize,
    pub frames_per_video: usize,
    pub sample_mode: SampleMode,
    pub frame_stride: usize,
    pub train_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    pub split_seed: u64,
    pub aggregation: Aggregation,
    pub threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            mean: [0.5; 3],
            std: [0.5; 3],
            store_size: 256,
            frames_per_video: 32,
            sample_mode: SampleMode::Count,
            frame_stride: 10,
            train_fraction: 0.8,
            test_fraction: 0.0,
            split_seed: 706,
            aggregation: Aggregation::Mean,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfaConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub local: LocalConfig,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl DfaConfig {
    /// Desk-scale configuration used by tests and the bundled
    /// `configs/mini.toml`.
    pub fn miniature() -> Self {
        DfaConfig {
            encoder: EncoderConfig::miniature(),
            adapter: AdapterConfig::miniature(),
            local: LocalConfig::miniature(),
            fusion: FusionConfig::miniature(),
            weights: WeightsConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                epochs: 50,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    /// Full-scale configuration: ViT-L/14 encoder, ViT-Tiny adapter,
    /// ResNeXt-50 local backbone, published training hyper-parameters.
    pub fn full() -> Self {
        DfaConfig {
            encoder: EncoderConfig::vit_l14(),
            adapter: AdapterConfig::tiny_for_vit_l14(),
            local: LocalConfig::full(),
            fusion: FusionConfig::full(),
            weights: WeightsConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
                std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
                ..DataConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate(
            self.encoder.num_heads,
            &self.encoder.tap_layers,
            self.encoder.image_size,
        )?;
        if self.encoder.inject_layers.is_empty() {
            return Err(DfaError::Config("encoder.inject_layers is empty".into()));
        }
        if !self.fusion.embed_dim.is_multiple_of(self.fusion.num_heads) {
            return Err(DfaError::Config("fusion embed_dim not divisible by num_heads".into()));
        }
        self.train.ablation.validate()?;
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(DfaError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(DfaError::Config("lr must be positive".into()));
        }
        if self.data.std.iter().any(|&s| s <= 0.0) {
            return Err(DfaError::Config("data.std entries must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.train_fraction)
            || !(0.0..=1.0).contains(&self.data.test_fraction)
            || self.data.train_fraction + self.data.test_fraction > 1.0
        {
            return Err(DfaError::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: DfaConfig = toml::from_str(text).map_err(|e| DfaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DfaError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DfaError::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Applies `key=value` overrides; keys must name existing entries.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| DfaError::Config(e.to_string()))?;
        // unset optional keys are absent from `doc` but may still be overridden
        let mut schema = doc.clone();
        for key in OPTIONAL_KEYS {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            if get_path(&schema, &path).is_none() {
                set_path(&mut schema, &path, toml::Value::String(String::new()))?;
            }
        }
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| DfaError::Config(format!("override `{ov}` is not key=value")))?;
            let path = resolve_key(&schema, key.trim())?;
            set_path(&mut doc, &path, parse_value(raw.trim()))?;
        }
        let cfg: DfaConfig = doc.try_into().map_err(|e: toml::de::Error| DfaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keys of `Option` fields, omitted from the serialized form when unset.
const OPTIONAL_KEYS: [&str; 2] = ["data.manifest", "weights.encoder_checkpoint"];

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn leaf_paths(v: &toml::Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            prefix.push(k.clone());
            match child {
                toml::Value::Table(_) => leaf_paths(child, prefix, out),
                _ => out.push(prefix.clone()),
            }
            prefix.pop();
        }
    }
}

fn get_path<'a>(v: &'a toml::Value, path: &[String]) -> Option<&'a toml::Value> {
    path.iter().try_fold(v, |cur, k| cur.as_table()?.get(k))
}

fn resolve_key(doc: &toml::Value, key: &str) -> Result<Vec<String>> {
    let dotted: Vec<String> = key.split('.').map(str::to_string).collect();
    if dotted.len() > 1 {
        return match get_path(doc, &dotted) {
            Some(toml::Value::Table(_)) => Err(DfaError::Config(format!("override key `{key}` names a section"))),
            Some(_) => Ok(dotted),
            None => Err(DfaError::Config(format!("unknown config key `{key}`"))),
        };
    }
    let mut leaves = Vec::new();
    leaf_paths(doc, &mut Vec::new(), &mut leaves);
    let hits: Vec<Vec<String>> = leaves.into_iter().filter(|p| p.last().map(String::as_str) == Some(key)).collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().expect("one hit")),
        0 => Err(DfaError::Config(format!("unknown config key `{key}`"))),
        _ => Err(DfaError::Config(format!(
            "config key `{key}` is ambiguous: {}",
            hits.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(doc: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = doc;
    for k in parents {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(k))
            .ok_or_else(|| DfaError::Config(format!("unknown config key `{}`", path.join("."))))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| DfaError::Config(format!("unknown config key `{}`", path.join("."))))?;
    // integers given for float fields, e.g. `lr=1`
    let value = match (table.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [DfaConfig::miniature(), DfaConfig::full()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(DfaConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn published_training_defaults() {
        let t = TrainConfig::default();
        assert_eq!(t.lr, 2e-6);
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.epochs, 6);
        assert_eq!(t.seed, 706);
        assert_eq!(DataConfig::default().frames_per_video, 32);
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let cfg = DfaConfig::miniature()
            .with_overrides(&["seed=11", "train.lr=0.5", "ifc_on=false", "data.aggregation=max"])
            .unwrap();
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.train.lr, 0.5);
        assert!(!cfg.train.ablation.ifc_on);
        assert_eq!(cfg.data.aggregation, Aggregation::Max);
    }

    #[test]
    fn unset_optional_keys_accept_overrides() {
        let cfg = DfaConfig::miniature()
            .with_overrides(&["manifest=store/manifest.json", "weights.encoder_checkpoint=enc.safetensors"])
            .unwrap();
        assert_eq!(cfg.data.manifest.as_deref(), Some("store/manifest.json"));
        assert_eq!(cfg.weights.encoder_checkpoint.as_deref(), Some("enc.safetensors"));
    }

    #[test]
    fn unknown_or_ambiguous_keys_are_rejected() {
        let base = DfaConfig::miniature();
        assert!(base.with_overrides(&["nope=1"]).is_err());
        assert!(base.with_overrides(&["train.nope=1"]).is_err());
        // `depth` exists in encoder, adapter and fusion
        assert!(base.with_overrides(&["depth=3"]).is_err());
        assert!(base.with_overrides(&["fusion.depth=3"]).is_ok());
    }

    #[test]
    fn ablation_needs_a_stream() {
        let r = DfaConfig::miniature().with_overrides(&["global_on=false", "local_on=false"]);
        assert!(matches!(r, Err(DfaError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = DfaConfig::miniature();
        let b = a.with_overrides(&["seed=1"]).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), DfaConfig::miniature().hash().unwrap());
    }
}
