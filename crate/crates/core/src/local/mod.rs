//! Local anomaly stream: region masks from landmarks modulate a
//! convolutional feature map, one token per region plus one for the
//! encoder feature.

pub mod backbone;
pub mod masks;
pub mod regions;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};
use crate::nn::{resample2d, Linear};
use crate::params::Scope;

pub use backbone::{Backbone, BackboneConfig};
pub use masks::{generate_masks, Landmarks, MaskOptions, RegionMasks};
pub use regions::{RegionMap, RegionSpec};

pub const LOCAL_PREFIX: &str = "local";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub backbone: BackboneConfig,
    /// Side of the square grid masks are rasterized on.
    pub mask_grid: usize,
    #[serde(default = "default_sigma")]
    pub mask_sigma: f64,
    /// Optional region mapping file; the built-in mapping otherwise.
    #[serde(default)]
    pub regions_file: Option<String>,
}

fn default_sigma() -> f64 {
    1.0
}

impl LocalConfig {
    pub fn miniature() -> Self {
        LocalConfig {
            backbone: BackboneConfig::Miniature { channels: [16, 32, 64] },
            mask_grid: 14,
            mask_sigma: 1.0,
            regions_file: None,
        }
    }

    pub fn full() -> Self {
        LocalConfig {
            backbone: BackboneConfig::Resnext50,
            mask_grid: 56,
            mask_sigma: 1.0,
            regions_file: None,
        }
    }

    pub fn region_map(&self) -> Result<RegionMap> {
        match &self.regions_file {
            Some(p) => RegionMap::load(p),
            None => Ok(RegionMap::default()),
        }
    }
}

/// Local token sequence `[N, R + 1, D_f]` and auxiliary logits `[N, 2]`.
#[derive(Debug, Clone)]
pub struct LocalFeatures {
    pub l_fmp: Tensor,
    pub aux_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct LocalStream {
    backbone: Backbone,
    region_proj: Linear,
    clip_proj: Linear,
    aux_head: Linear,
    num_regions: usize,
}

impl LocalStream {
    pub fn new(
        s: &mut Scope,
        cfg: &LocalConfig,
        num_regions: usize,
        encoder_dim: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let backbone = Backbone::new(&mut s.pp("backbone"), &cfg.backbone)?;
        let c = cfg.backbone.out_channels();
        Ok(LocalStream {
            backbone,
            region_proj: Linear::new(&mut s.pp("region_proj"), c, feature_dim)?,
            clip_proj: Linear::new(&mut s.pp("clip_proj"), encoder_dim, feature_dim)?,
            aux_head: Linear::new(&mut s.pp("aux_head"), feature_dim, 2)?,
            num_regions,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Region tokens from a backbone map `[N, C, h, w]` and masks
    /// `[N, R, h_m, w_m]`: masks are resampled to the map grid, each
    /// region's masked map is mean-pooled and channel-projected.
    pub fn region_tokens(&self, fmap: &Tensor, masks: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = fmap.dims4()?;
        let (nm, r, _, _) = masks.dims4()?;
        if nm != n || r != self.num_regions {
            return Err(DfaError::Shape(format!(
                "masks {:?} do not match batch {n} with {} regions",
                masks.dims(),
                self.num_regions
            )));
        }
        let m = resample2d(&masks.to_dtype(fmap.dtype())?, h, w)?;
        if m.dims()[2..] != [h, w] {
            return Err(DfaError::Shape("mask grid mismatch after resampling".into()));
        }
        // [N, 1, C, h, w] * [N, R, 1, h, w] pooled over (h, w)
        let modulated = fmap.unsqueeze(1)?.broadcast_mul(&m.unsqueeze(2)?)?;
        let pooled = modulated.reshape((n, r, c, h * w))?.mean(3)?;
        self.region_proj.forward(&pooled)
    }

    pub fn extract_local_features(&self, images: &Tensor, masks: &Tensor, clip_feature: &Tensor) -> Result<LocalFeatures> {
        let fmap = self.backbone.forward(&images.to_dtype(self.region_proj.weight.dtype())?)?;
        let regions = self.region_tokens(&fmap, masks)?;
        let clip = self
            .clip_proj
            .forward(&clip_feature.to_dtype(regions.dtype())?)?
            .unsqueeze(1)?;
        let l_fmp = Tensor::cat(&[&regions, &clip], 1)?;
        let aux_logits = self.aux_head.forward(&l_fmp.mean(1)?)?;
        Ok(LocalFeatures { l_fmp, aux_logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VarStore;
    use candle_core::{DType, Device};

    fn stream() -> LocalStream {
        let mut vs = VarStore::new(5, DType::F64, Device::Cpu);
        let mut s = Scope::new(&mut vs, LOCAL_PREFIX);
        LocalStream::new(&mut s, &LocalConfig::miniature(), 7, 64, 64).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn local_token_shape() {
        let ls = stream();
        let masks = Tensor::ones((2, 7, 14, 14), DType::F64, &Device::Cpu).unwrap();
        let out = ls
            .extract_local_features(&rand_tensor(&[2, 3, 64, 64], 1), &masks, &rand_tensor(&[2, 64], 2))
            .unwrap();
        assert_eq!(out.l_fmp.dims(), &[2, 8, 64]);
        assert_eq!(out.aux_logits.dims(), &[2, 2]);
    }

    #[test]
    fn zero_mask_gives_projection_bias() {
        let ls = stream();
        let fmap = rand_tensor(&[1, 64, 7, 7], 3);
        let masks = Tensor::zeros((1, 7, 14, 14), DType::F64, &Device::Cpu).unwrap();
        let tok = ls.region_tokens(&fmap, &masks).unwrap();
        let bias = ls.region_proj.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        let t = tok.to_vec3::<f64>().unwrap();
        for r in 0..7 {
            for (a, b) in t[0][r].iter().zip(&bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_mask_gives_projection_of_pooled_map() {
        let ls = stream();
        let fmap = rand_tensor(&[1, 64, 7, 7], 4);
        let masks = Tensor::ones((1, 7, 14, 14), DType::F64, &Device::Cpu).unwrap();
        let tok = ls.region_tokens(&fmap, &masks).unwrap().to_vec3::<f64>().unwrap();
        let pooled = fmap.reshape((1, 64, 49)).unwrap().mean(2).unwrap();
        let expect = ls.region_proj.forward(&pooled).unwrap().to_vec2::<f64>().unwrap();
        for r in 0..7 {
            for (a, b) in tok[0][r].iter().zip(&expect[0]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn region_count_mismatch_is_shape_error() {
        let ls = stream();
        let fmap = rand_tensor(&[1, 64, 7, 7], 4);
        let masks = Tensor::ones((1, 5, 14, 14), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(ls.region_tokens(&fmap, &masks), Err(DfaError::Shape(_))));
    }
}
