//! Convolutional feature extractors for the local stream, truncated before
//! global pooling and classification.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Activation, Conv2d};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Three strided conv blocks; a 64 px input yields a 7x7 grid.
    Miniature { channels: [usize; 3] },
    /// ResNeXt-50 (32x4d) up to and including its last residual stage.
    Resnext50,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        match self {
            BackboneConfig::Miniature { channels } => channels[2],
            BackboneConfig::Resnext50 => 2048,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Miniature(Vec<Conv2d>),
    Resnext(Box<Resnext>),
}

impl Backbone {
    pub fn new(s: &mut Scope, cfg: &BackboneConfig) -> Result<Self> {
        Ok(match cfg {
            BackboneConfig::Miniature { channels } => {
                let [c1, c2, c3] = *channels;
                Backbone::Miniature(vec![
                    Conv2d::new(&mut s.pp("conv1"), 3, c1, 3, 2, 1, true)?,
                    Conv2d::new(&mut s.pp("conv2"), c1, c2, 3, 2, 1, true)?,
                    Conv2d::new(&mut s.pp("conv3"), c2, c3, 4, 2, 0, true)?,
                ])
            }
            BackboneConfig::Resnext50 => Backbone::Resnext(Box::new(Resnext::new(s, [3, 4, 6, 3], 32, 4)?)),
        })
    }

    /// `[N, 3, S, S] -> [N, C_b, h_b, w_b]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Miniature(convs) => {
                let mut x = x.clone();
                for c in convs {
                    x = Activation::Gelu.apply(&c.forward(&x)?)?;
                }
                Ok(x)
            }
            Backbone::Resnext(r) => r.forward(x),
        }
    }
}

/// Batch norm with fixed statistics and a learnable affine part.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl FrozenBatchNorm {
    fn new(s: &mut Scope, ch: usize) -> Result<Self> {
        let weight = s.get("weight", &[ch], Init::Ones)?;
        let bias = s.get("bias", &[ch], Init::Zeros)?;
        let running_mean = Tensor::zeros(ch, s.dtype(), s.device())?;
        let running_var = Tensor::ones(ch, s.dtype(), s.device())?;
        Ok(FrozenBatchNorm {
            weight,
            bias,
            running_mean,
            running_var,
        })
    }

    /// Replaces the fixed statistics (e.g. from a pretrained model).
    pub fn set_statistics(&mut self, mean: Tensor, var: Tensor) {
        self.running_mean = mean;
        self.running_var = var;
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let scale = (self.weight.clone() / (self.running_var.clone() + 1e-5)?.sqrt()?)?;
        let shift = (&self.bias - (&self.running_mean * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(s: &mut Scope, in_ch: usize, planes: usize, stride: usize, groups: usize, base_width: usize) -> Result<Self> {
        let width = planes * base_width / 64 * groups;
        let out = planes * 4;
        let downsample = if stride != 1 || in_ch != out {
            let mut d = s.pp("downsample");
            Some((
                Conv2d::new(&mut d.pp(0), in_ch, out, 1, stride, 0, false)?,
                FrozenBatchNorm::new(&mut d.pp(1), out)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: Conv2d::new(&mut s.pp("conv1"), in_ch, width, 1, 1, 0, false)?,
            bn1: FrozenBatchNorm::new(&mut s.pp("bn1"), width)?,
            conv2: Conv2d::grouped(&mut s.pp("conv2"), width, width, 3, stride, 1, groups, false)?,
            bn2: FrozenBatchNorm::new(&mut s.pp("bn2"), width)?,
            conv3: Conv2d::new(&mut s.pp("conv3"), width, out, 1, 1, 0, false)?,
            bn3: FrozenBatchNorm::new(&mut s.pp("bn3"), out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNeXt trunk with torchvision parameter names (`conv1`, `bn1`,
/// `layer{1..4}.{i}.*`), so pretrained weights load by name.
#[derive(Debug, Clone)]
pub struct Resnext {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl Resnext {
    fn new(s: &mut Scope, blocks: [usize; 4], groups: usize, base_width: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&mut s.pp("conv1"), 3, 64, 7, 2, 3, false)?;
        let bn1 = FrozenBatchNorm::new(&mut s.pp("bn1"), 64)?;
        let mut in_ch = 64;
        let mut layers = Vec::new();
        for (li, (&n, planes)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
            let mut stage = Vec::new();
            let mut ls = s.pp(format!("layer{}", li + 1));
            for b in 0..n {
                let stride = if b == 0 && li > 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(&mut ls.pp(b), in_ch, planes, stride, groups, base_width)?);
                in_ch = planes * 4;
            }
            layers.push(stage);
        }
        Ok(Resnext { conv1, bn1, layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        // 3x3/2 max pool with padding 1; inputs are post-ReLU so zero
        // padding is equivalent to -inf padding.
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for stage in &self.layers {
            for block in stage {
                x = block.forward(&x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VarStore;
    use candle_core::{DType, Device};

    #[test]
    fn miniature_grid_is_7x7() {
        let mut vs = VarStore::new(0, DType::F32, Device::Cpu);
        let mut s = Scope::new(&mut vs, "b");
        let b = Backbone::new(&mut s, &BackboneConfig::Miniature { channels: [8, 16, 32] }).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(b.forward(&x).unwrap().dims(), &[2, 32, 7, 7]);
    }

    #[test]
    fn resnext50_trunk_shape() {
        let mut vs = VarStore::new(0, DType::F32, Device::Cpu);
        let mut s = Scope::new(&mut vs, "b");
        let b = Backbone::new(&mut s, &BackboneConfig::Resnext50).unwrap();
        // 22.98M conv/bn parameters without the classifier
        let n = vs.num_elements();
        assert!((22_900_000..23_100_000).contains(&n), "{n}");
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(b.forward(&x).unwrap().dims(), &[1, 2048, 2, 2]);
    }
}
