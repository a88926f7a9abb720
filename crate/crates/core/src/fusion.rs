//! Fusion classifier: joint transformer encoder over the concatenated
//! global and local token sequences, mean pooling, two-way head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};
use crate::nn::{fake_probability, Activation, Block, Linear};
use crate::params::{Init, Scope};

pub const FUSION_PREFIX: &str = "fusion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub depth: usize,
    pub num_heads: usize,
    /// Common token width `D_f` of both streams.
    pub embed_dim: usize,
    #[serde(default = "mean_pooling")]
    pub pooling: Pooling,
}

fn mean_pooling() -> Pooling {
    Pooling::Mean
}

impl FusionConfig {
    pub fn miniature() -> Self {
        FusionConfig {
            depth: 2,
            num_heads: 4,
            embed_dim: 64,
            pooling: Pooling::Mean,
        }
    }

    pub fn full() -> Self {
        FusionConfig {
            depth: 2,
            num_heads: 4,
            embed_dim: 256,
            pooling: Pooling::Mean,
        }
    }
}

/// Which stream a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Global = 0,
    Local = 1,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    /// Probability of the fake class, `[N]`.
    pub score: Tensor,
    /// Pooled fused representation `[N, D_f]`.
    pub pooled: Tensor,
}

#[derive(Debug, Clone)]
pub struct FusionClassifier {
    stream_embed: Tensor,
    blocks: Vec<Block>,
    head: Linear,
    dim: usize,
}

impl FusionClassifier {
    pub fn new(s: &mut Scope, cfg: &FusionConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let stream_embed = s.get("stream_embed", &[2, d], Init::Normal(0.5))?;
        let mut blocks = Vec::new();
        for i in 0..cfg.depth {
            let mut b = s.pp("blocks");
            blocks.push(Block::new(&mut b.pp(i), d, cfg.num_heads, 4, Activation::Gelu)?);
        }
        let head = Linear::new(&mut s.pp("head"), d, 2)?;
        Ok(FusionClassifier {
            stream_embed,
            blocks,
            head,
            dim: d,
        })
    }

    /// Concatenates the streams along the sequence axis, each with its
    /// stream embedding added.
    pub fn joint_sequence(&self, streams: &[(Stream, &Tensor)]) -> Result<Tensor> {
        if streams.is_empty() {
            return Err(DfaError::InvalidArgument("fusion needs at least one stream".into()));
        }
        let mut parts = Vec::with_capacity(streams.len());
        for (id, seq) in streams {
            let d = seq.dims3()?.2;
            if d != self.dim {
                return Err(DfaError::Shape(format!(
                    "{id:?} stream width {d} != fusion width {}",
                    self.dim
                )));
            }
            let e = self.stream_embed.narrow(0, *id as usize, 1)?;
            parts.push(seq.broadcast_add(&e)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Transformer encoder over a joint sequence, then mean pooling.
    pub fn encode_and_pool(&self, joint: &Tensor) -> Result<Tensor> {
        let mut x = joint.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x.mean(1)?)
    }

    pub fn classify_pooled(&self, pooled: Tensor) -> Result<Prediction> {
        let logits = self.head.forward(&pooled)?;
        let score = fake_probability(&logits)?;
        Ok(Prediction {
            logits,
            score,
            pooled,
        })
    }

    pub fn forward(&self, streams: &[(Stream, &Tensor)]) -> Result<Prediction> {
        let joint = self.joint_sequence(streams)?;
        self.classify_pooled(self.encode_and_pool(&joint)?)
    }

    /// Both streams: `g_fmp` then `l_fmp`.
    pub fn fuse_and_classify(&self, g_fmp: &Tensor, l_fmp: &Tensor) -> Result<Prediction> {
        self.forward(&[(Stream::Global, g_fmp), (Stream::Local, l_fmp)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VarStore;
    use candle_core::{DType, Device};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn classifier(depth: usize) -> FusionClassifier {
        let mut vs = VarStore::new(9, DType::F64, Device::Cpu);
        let mut s = Scope::new(&mut vs, FUSION_PREFIX);
        let mut cfg = FusionConfig::miniature();
        cfg.depth = depth;
        FusionClassifier::new(&mut s, &cfg).unwrap()
    }

    #[test]
    fn joint_shapes() {
        let f = classifier(2);
        let g = rand(&[2, 20, 64], 1);
        let l = rand(&[2, 8, 64], 2);
        let joint = f
            .joint_sequence(&[(Stream::Global, &g), (Stream::Local, &l)])
            .unwrap();
        assert_eq!(joint.dims(), &[2, 28, 64]);
        let p = f.fuse_and_classify(&g, &l).unwrap();
        assert_eq!(p.logits.dims(), &[2, 2]);
        assert_eq!(p.score.dims(), &[2]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let f = classifier(1);
        let g = rand(&[1, 4, 32], 1);
        let l = rand(&[1, 4, 64], 2);
        assert!(matches!(f.fuse_and_classify(&g, &l), Err(DfaError::Shape(_))));
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let f = classifier(2);
        let g1 = rand(&[1, 20, 64], 3);
        let l1 = rand(&[1, 8, 64], 4);
        let g = Tensor::cat(&[&g1, &g1], 0).unwrap();
        let l = Tensor::cat(&[&l1, &l1], 0).unwrap();
        let logits = f.fuse_and_classify(&g, &l).unwrap().logits.to_vec2::<f64>().unwrap();
        assert_eq!(logits[0], logits[1]);
    }

    #[test]
    fn scores_are_normalized() {
        let f = classifier(2);
        let p = f.fuse_and_classify(&rand(&[3, 20, 64], 5), &rand(&[3, 8, 64], 6)).unwrap();
        let probs = crate::nn::softmax_last(&p.logits).unwrap().to_vec2::<f64>().unwrap();
        for row in probs {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&row[1]));
        }
    }
}
