//! The assembled detector: frozen encoder, global adapter with shadow
//! tokens, local stream, fusion classifier and loss weights.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{BiasTensor, GlobalAdapter, GlobalFeatures, ADAPTER_PREFIX};
use crate::config::{Ablation, DfaConfig};
use crate::data::Batch;
use crate::encoder::{Encoder, EncoderTapSet};
use crate::error::{DfaError, Result};
use crate::fusion::{FusionClassifier, Prediction, Stream, FUSION_PREFIX};
use crate::local::{generate_masks, LocalFeatures, LocalStream, MaskOptions, RegionMap, LOCAL_PREFIX};
use crate::nn::{cross_entropy, fake_probability};
use crate::params::{load_map, Scope, VarStore};
use crate::train::loss::{LossWeights, StreamLosses, LOSS_WEIGHTS_PREFIX};

/// How the frozen encoder weights were obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderRef {
    pub checkpoint: Option<String>,
    pub sha256: Option<String>,
    pub init_seed: Option<u64>,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DfaError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Builds the frozen encoder named by the config: loaded from
/// `weights.encoder_checkpoint`, or seeded reference weights.
pub fn build_encoder(cfg: &DfaConfig, device: &Device) -> Result<(Encoder, EncoderRef)> {
    let dtype = cfg.weights.precision.dtype();
    match &cfg.weights.encoder_checkpoint {
        Some(p) => {
            let path = Path::new(p);
            let mut enc = Encoder::new(cfg.encoder.clone(), dtype, device.clone())?;
            enc.load_checkpoint(&load_map(path, device)?)?;
            Ok((
                enc,
                EncoderRef {
                    checkpoint: Some(p.clone()),
                    sha256: Some(file_sha256(path)?),
                    init_seed: None,
                },
            ))
        }
        None => Ok((
            Encoder::seeded(cfg.encoder.clone(), cfg.weights.init_seed, dtype, device.clone())?,
            EncoderRef {
                checkpoint: None,
                sha256: None,
                init_seed: Some(cfg.weights.init_seed),
            },
        )),
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct DfaOutput {
    pub encoder: EncoderTapSet,
    pub bias: Option<BiasTensor>,
    pub global: Option<GlobalFeatures>,
    pub local: Option<LocalFeatures>,
    pub fused: Option<Prediction>,
    /// Final fake probability `[N]`.
    pub score: Tensor,
}

pub struct Dfa {
    cfg: DfaConfig,
    encoder: Encoder,
    adapter: GlobalAdapter,
    local: LocalStream,
    fusion: FusionClassifier,
    loss_weights: LossWeights,
    regions: RegionMap,
    vars: VarStore,
}

impl Dfa {
    /// Trainable parts are initialized from `cfg.train.seed`.
    pub fn new(cfg: &DfaConfig, encoder: Encoder) -> Result<Self> {
        cfg.validate()?;
        if encoder.config() != &cfg.encoder {
            return Err(DfaError::Config("encoder does not match the configured encoder".into()));
        }
        if !encoder.is_loaded() {
            return Err(DfaError::UninitializedEncoder);
        }
        let regions = cfg.local.region_map()?;
        let dtype = cfg.weights.precision.dtype();
        let mut vars = VarStore::new(cfg.train.seed, dtype, Device::Cpu);
        let d_enc = cfg.encoder.embed_dim;
        let d_f = cfg.fusion.embed_dim;
        let adapter = GlobalAdapter::new(
            &mut Scope::new(&mut vars, ADAPTER_PREFIX),
            &cfg.adapter,
            d_enc,
            cfg.encoder.image_size,
            d_f,
        )?;
        let local = LocalStream::new(&mut Scope::new(&mut vars, LOCAL_PREFIX), &cfg.local, regions.len(), d_enc, d_f)?;
        let fusion = FusionClassifier::new(&mut Scope::new(&mut vars, FUSION_PREFIX), &cfg.fusion)?;
        let loss_weights = LossWeights::new(&mut Scope::new(&mut vars, LOSS_WEIGHTS_PREFIX))?;
        Ok(Dfa {
            cfg: cfg.clone(),
            encoder,
            adapter,
            local,
            fusion,
            loss_weights,
            regions,
            vars,
        })
    }

    pub fn config(&self) -> &DfaConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn adapter(&self) -> &GlobalAdapter {
        &self.adapter
    }

    pub fn local_stream(&self) -> &LocalStream {
        &self.local
    }

    pub fn fusion(&self) -> &FusionClassifier {
        &self.fusion
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.loss_weights
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    /// All trainable variables; the encoder contributes none.
    pub fn vars(&self) -> &VarStore {
        &self.vars
    }

    pub fn dtype(&self) -> DType {
        self.cfg.weights.precision.dtype()
    }

    /// Region masks `[N, R, g, g]` on the configured mask grid.
    pub fn masks(&self, batch: &Batch) -> Result<Tensor> {
        let size = batch.images.dim(3)?;
        let g = self.cfg.local.mask_grid;
        let m = generate_masks(
            &batch.landmarks,
            &self.regions,
            (g, g),
            size,
            MaskOptions {
                sigma: self.cfg.local.mask_sigma,
            },
        )?;
        m.to_tensor(self.dtype(), batch.images.device())
    }

    /// Forward pass. Without the global stream the encoder runs vanilla
    /// with no shadow tokens; without the fusion classifier the score is
    /// the mean of the active auxiliary heads' probabilities.
    pub fn forward(&self, batch: &Batch, ablation: Ablation) -> Result<DfaOutput> {
        ablation.validate()?;
        let images = batch.images.to_dtype(self.dtype())?;
        let mut run = self.encoder.forward_frozen(&images)?;
        let (bias, global) = if ablation.global_on {
            let ad = self.adapter.forward(&images, &run, self.cfg.encoder.grid())?;
            let sls = self.encoder.shadow_pass(&run, &ad.bias)?;
            let g = self.adapter.produce_global_features(&sls, &ad.states.visual)?;
            run.final_sls = Some(sls);
            (Some(ad.bias), Some(g))
        } else {
            (None, None)
        };
        let local = if ablation.local_on {
            let masks = self.masks(batch)?;
            Some(self.local.extract_local_features(&images, &masks, &run.final_cls)?)
        } else {
            None
        };
        let (fused, score) = if ablation.ifc_on {
            let mut streams = Vec::new();
            if let Some(g) = &global {
                streams.push((Stream::Global, &g.g_fmp));
            }
            if let Some(l) = &local {
                streams.push((Stream::Local, &l.l_fmp));
            }
            let p = self.fusion.forward(&streams)?;
            let s = p.score.clone();
            (Some(p), s)
        } else {
            let mut probs = Vec::new();
            if let Some(g) = &global {
                probs.push(fake_probability(&g.aux_logits)?);
            }
            if let Some(l) = &local {
                probs.push(fake_probability(&l.aux_logits)?);
            }
            let k = probs.len() as f64;
            let sum = probs
                .into_iter()
                .reduce(|a, b| (a + b).expect("same shape"))
                .expect("an active stream");
            (None, (sum / k)?)
        };
        Ok(DfaOutput {
            encoder: run,
            bias,
            global,
            local,
            fused,
            score,
        })
    }

    /// Two-class cross-entropy of each present head against `labels`.
    pub fn stream_losses(&self, out: &DfaOutput, labels: &Tensor) -> Result<StreamLosses> {
        Ok(StreamLosses {
            global: out.global.as_ref().map(|g| cross_entropy(&g.aux_logits, labels)).transpose()?,
            local: out.local.as_ref().map(|l| cross_entropy(&l.aux_logits, labels)).transpose()?,
            fusion: out.fused.as_ref().map(|p| cross_entropy(&p.logits, labels)).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_samples;

    fn model() -> Dfa {
        let cfg = DfaConfig::miniature();
        let (enc, _) = build_encoder(&cfg, &Device::Cpu).unwrap();
        Dfa::new(&cfg, enc).unwrap()
    }

    fn batch(n: usize) -> Batch {
        let s = synthetic_samples(n, 64, 3, [0.5; 3], [0.5; 3]);
        let refs: Vec<_> = s.iter().collect();
        Batch::new(&refs, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn full_forward_shapes() {
        let m = model();
        let out = m.forward(&batch(2), Ablation::FULL).unwrap();
        assert_eq!(out.score.dims(), &[2]);
        assert_eq!(out.global.as_ref().unwrap().g_fmp.dims(), &[2, 20, 64]);
        assert_eq!(out.local.as_ref().unwrap().l_fmp.dims(), &[2, 8, 64]);
        assert_eq!(out.encoder.final_sls.as_ref().unwrap().dims(), &[2, 4, 64]);
    }

    #[test]
    fn ablations_wire_streams() {
        let m = model();
        let b = batch(2);
        let no_global = m
            .forward(
                &b,
                Ablation {
                    global_on: false,
                    ..Ablation::FULL
                },
            )
            .unwrap();
        assert!(no_global.bias.is_none() && no_global.encoder.final_sls.is_none());
        let no_ifc = m
            .forward(
                &b,
                Ablation {
                    ifc_on: false,
                    ..Ablation::FULL
                },
            )
            .unwrap();
        assert!(no_ifc.fused.is_none());
        let pg = fake_probability(&no_ifc.global.unwrap().aux_logits).unwrap();
        let pl = fake_probability(&no_ifc.local.unwrap().aux_logits).unwrap();
        let mean = ((pg + pl).unwrap() / 2.0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(no_ifc.score.to_vec1::<f32>().unwrap(), mean);
    }

    #[test]
    fn trainable_set_excludes_encoder() {
        let m = model();
        assert!(m.vars().vars().keys().all(|k| !k.starts_with("encoder")));
        assert!(m.vars().var("loss_weights.raw_fusion").is_some());
    }
}
