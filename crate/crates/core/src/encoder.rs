//! Frozen vision-transformer encoder with intermediate-layer taps and
//! shadow-token attention injection.
//!
//! The encoder's own tokens (`[CLS]` followed by the patch tokens) are always
//! computed by the unmodified forward pass; shadow tokens attend to the full
//! token set but are never attended to, so injection cannot change the
//! encoder's native outputs.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::BiasTensor;
use crate::error::{DfaError, Result};
use crate::nn::{split_heads, merge_heads, attention_probs, Activation, Block, Conv2d, LayerNorm};
use crate::params::{Init, ParamMap, ParamSource, Scope, TensorStore};

/// Name prefix of every encoder parameter in the flat checkpoint container.
pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// 1-based layer indices whose output visual tokens are exported.
    pub tap_layers: Vec<usize>,
    /// 1-based layer indices where the attention bias is applied to the
    /// shadow tokens.
    pub inject_layers: Vec<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    /// Reference configuration for tests: every mechanism, milliseconds.
    pub fn miniature() -> Self {
        EncoderConfig {
            depth: 4,
            embed_dim: 64,
            num_heads: 4,
            patch_size: 16,
            image_size: 64,
            tap_layers: vec![1, 2, 3],
            inject_layers: vec![3, 4],
            mlp_ratio: 4,
        }
    }

    /// ViT-L/14 visual tower at 224 px.
    pub fn vit_l14() -> Self {
        EncoderConfig {
            depth: 24,
            embed_dim: 1024,
            num_heads: 16,
            patch_size: 14,
            image_size: 224,
            tap_layers: vec![1, 8, 15],
            inject_layers: (13..=24).collect(),
            mlp_ratio: 4,
        }
    }

    /// Upper half of the encoder, `depth/2 + 1 ..= depth`.
    pub fn default_inject_layers(depth: usize) -> Vec<usize> {
        (depth / 2 + 1..=depth).collect()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return Err(DfaError::Config("encoder sizes must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(DfaError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(DfaError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        for (what, layers) in [("tap_layers", &self.tap_layers), ("inject_layers", &self.inject_layers)] {
            if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > self.depth) {
                return Err(DfaError::Config(format!(
                    "{what} entry {bad} outside [1, {}]",
                    self.depth
                )));
            }
        }
        Ok(())
    }
}

/// Maps a published CLIP vision-tower parameter name (Hugging Face layout)
/// onto the internal name schema. Internal names map to themselves; names
/// that belong to neither schema (text tower, projection heads) map to
/// `None`.
///
/// | published                                                   | internal                              |
/// |-------------------------------------------------------------|---------------------------------------|
/// | `vision_model.embeddings.patch_embedding.weight`            | `encoder.embed.patch.weight`          |
/// | `vision_model.embeddings.class_embedding`                   | `encoder.embed.cls`                   |
/// | `vision_model.embeddings.position_embedding.weight`         | `encoder.embed.pos`                   |
/// | `vision_model.pre_layrnorm.{weight,bias}`                   | `encoder.pre_ln.{weight,bias}`        |
/// | `vision_model.encoder.layers.{i}.layer_norm1.*`             | `encoder.blocks.{i}.ln1.*`            |
/// | `vision_model.encoder.layers.{i}.self_attn.q_proj.*`        | `encoder.blocks.{i}.attn.q.*`         |
/// | `vision_model.encoder.layers.{i}.self_attn.k_proj.*`        | `encoder.blocks.{i}.attn.k.*`         |
/// | `vision_model.encoder.layers.{i}.self_attn.v_proj.*`        | `encoder.blocks.{i}.attn.v.*`         |
/// | `vision_model.encoder.layers.{i}.self_attn.out_proj.*`      | `encoder.blocks.{i}.attn.out.*`       |
/// | `vision_model.encoder.layers.{i}.layer_norm2.*`             | `encoder.blocks.{i}.ln2.*`            |
/// | `vision_model.encoder.layers.{i}.mlp.fc1.*`                 | `encoder.blocks.{i}.mlp.fc1.*`        |
/// | `vision_model.encoder.layers.{i}.mlp.fc2.*`                 | `encoder.blocks.{i}.mlp.fc2.*`        |
/// | `vision_model.post_layernorm.{weight,bias}`                 | `encoder.post_ln.{weight,bias}`       |
pub fn map_published_name(name: &str) -> Option<String> {
    if name.starts_with("encoder.") {
        return Some(name.to_string());
    }
    let rest = name.strip_prefix("vision_model.")?;
    let fixed = [
        ("embeddings.patch_embedding.weight", "embed.patch.weight"),
        ("embeddings.class_embedding", "embed.cls"),
        ("embeddings.position_embedding.weight", "embed.pos"),
        ("pre_layrnorm.weight", "pre_ln.weight"),
        ("pre_layrnorm.bias", "pre_ln.bias"),
        ("post_layernorm.weight", "post_ln.weight"),
        ("post_layernorm.bias", "post_ln.bias"),
    ];
    if let Some((_, internal)) = fixed.iter().find(|(p, _)| *p == rest) {
        return Some(format!("{ENCODER_PREFIX}.{internal}"));
    }
    let rest = rest.strip_prefix("encoder.layers.")?;
    let (idx, tail) = rest.split_once('.')?;
    let idx: usize = idx.parse().ok()?;
    let tail = [
        ("layer_norm1.", "ln1."),
        ("layer_norm2.", "ln2."),
        ("self_attn.q_proj.", "attn.q."),
        ("self_attn.k_proj.", "attn.k."),
        ("self_attn.v_proj.", "attn.v."),
        ("self_attn.out_proj.", "attn.out."),
        ("mlp.fc1.", "mlp.fc1."),
        ("mlp.fc2.", "mlp.fc2."),
    ]
    .iter()
    .find_map(|(p, i)| tail.strip_prefix(p).map(|leaf| format!("{i}{leaf}")))?;
    Some(format!("{ENCODER_PREFIX}.blocks.{idx}.{tail}"))
}

/// Per-layer token states from one frozen forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTapSet {
    /// Visual tokens `[N, T, D]` keyed by 1-based layer.
    pub taps: BTreeMap<usize, Tensor>,
    /// Post-norm `[CLS]` state `[N, D]`.
    pub final_cls: Tensor,
    /// Final visual tokens `[N, T, D]`.
    pub final_visual: Tensor,
    /// Post-norm shadow tokens `[N, L_Q, D]`; present only after injection.
    pub final_sls: Option<Tensor>,
    /// Input hidden state `[N, 1+T, D]` of every block from the first
    /// injection layer onward, keyed by 1-based layer.
    layer_inputs: BTreeMap<usize, Tensor>,
}

#[derive(Debug, Clone)]
struct EncoderWeights {
    patch: Conv2d,
    cls: Tensor,
    pos: Tensor,
    pre_ln: LayerNorm,
    blocks: Vec<Block>,
    post_ln: LayerNorm,
    values: ParamMap,
}

impl EncoderWeights {
    fn build(cfg: &EncoderConfig, src: &mut dyn ParamSource) -> Result<Self> {
        let d = cfg.embed_dim;
        let t = cfg.num_visual_tokens();
        let mut root = Scope::new(src, ENCODER_PREFIX);
        let patch = {
            let mut s = root.pp("embed");
            let mut p = s.pp("patch");
            Conv2d::new(&mut p, 3, d, cfg.patch_size, cfg.patch_size, 0, false)?
        };
        let cls = root.pp("embed").get("cls", &[d], Init::Normal(0.5))?;
        let pos = root.pp("embed").get("pos", &[t + 1, d], Init::Normal(0.1))?;
        let pre_ln = LayerNorm::new(&mut root.pp("pre_ln"), d, 1e-5)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut s = root.pp("blocks");
            let mut b = s.pp(i);
            blocks.push(Block::new(&mut b, d, cfg.num_heads, cfg.mlp_ratio, Activation::QuickGelu)?);
        }
        let post_ln = LayerNorm::new(&mut root.pp("post_ln"), d, 1e-5)?;
        Ok(EncoderWeights {
            patch,
            cls,
            pos,
            pre_ln,
            blocks,
            post_ln,
            values: ParamMap::new(),
        })
    }
}

/// The frozen encoder. None of its tensors is a trainable variable, so no
/// gradient can ever be accumulated into them.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    dtype: DType,
    device: Device,
    weights: Option<EncoderWeights>,
}

impl Encoder {
    /// An encoder with no weights; [`Encoder::load_checkpoint`] must run
    /// before any forward pass.
    pub fn new(cfg: EncoderConfig, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            cfg,
            dtype,
            device,
            weights: None,
        })
    }

    /// Seeded reference weights.
    pub fn seeded(cfg: EncoderConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        let mut enc = Encoder::new(cfg, dtype, device.clone())?;
        let mut store = TensorStore::seeded(seed, dtype, device);
        let mut w = EncoderWeights::build(&enc.cfg, &mut store)?;
        w.values = store.finish()?;
        enc.weights = Some(w);
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn is_loaded(&self) -> bool {
        self.weights.is_some()
    }

    /// Assigns every encoder parameter from a flat name → tensor map. Names
    /// in the published layout are translated by [`map_published_name`].
    pub fn load_checkpoint(&mut self, map: &ParamMap) -> Result<()> {
        let mut internal = ParamMap::new();
        for (name, t) in map {
            if let Some(n) = map_published_name(name) {
                internal.insert(n, t.clone());
            }
        }
        let mut store = TensorStore::lookup(internal, self.dtype, self.device.clone());
        let built = EncoderWeights::build(&self.cfg, &mut store);
        let values = store.finish()?;
        let mut w = built?;
        w.values = values;
        self.weights = Some(w);
        Ok(())
    }

    /// Current parameter values under internal names.
    pub fn parameters(&self) -> Result<&ParamMap> {
        Ok(&self.weights()?.values)
    }

    fn weights(&self) -> Result<&EncoderWeights> {
        self.weights.as_ref().ok_or(DfaError::UninitializedEncoder)
    }

    fn block(&self, layer: usize) -> Result<&Block> {
        let w = self.weights()?;
        w.blocks
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| DfaError::Config(format!("layer {layer} outside [1, {}]", self.cfg.depth)))
    }

    fn first_shadow_layer(&self) -> Option<usize> {
        self.cfg.inject_layers.iter().copied().min()
    }

    /// Frozen forward pass collecting the configured taps.
    pub fn forward_frozen(&self, images: &Tensor) -> Result<EncoderTapSet> {
        let w = self.weights()?;
        let (n, c, h, wd) = images.dims4().map_err(|_| {
            DfaError::Shape(format!("expected images [N,3,S,S], got {:?}", images.dims()))
        })?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || wd != s {
            return Err(DfaError::Shape(format!(
                "expected images [N,3,{s},{s}], got {:?}",
                images.dims()
            )));
        }
        let images = images.to_dtype(self.dtype)?;
        let d = self.cfg.embed_dim;
        let t = self.cfg.num_visual_tokens();
        let patches = w.patch.forward(&images)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = w.cls.reshape((1, 1, d))?.broadcast_as((n, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&w.pos)?;
        x = w.pre_ln.forward(&x)?;

        let taps_wanted: BTreeSet<usize> = self.cfg.tap_layers.iter().copied().collect();
        let first_shadow = self.first_shadow_layer();
        let mut taps = BTreeMap::new();
        let mut layer_inputs = BTreeMap::new();
        for (i, block) in w.blocks.iter().enumerate() {
            let layer = i + 1;
            if first_shadow.is_some_and(|f| layer >= f) {
                layer_inputs.insert(layer, x.clone());
            }
            x = block.forward(&x)?;
            if taps_wanted.contains(&layer) {
                taps.insert(layer, x.narrow(1, 1, t)?);
            }
        }
        let final_cls = w.post_ln.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        let final_visual = x.narrow(1, 1, t)?;
        Ok(EncoderTapSet {
            taps,
            final_cls,
            final_visual,
            final_sls: None,
            layer_inputs,
        })
    }

    /// Pads a bias `[N, H, L_Q, h, w]` over the full key set
    /// `[visual, CLS, shadow]`: `[N, H, L_Q, T + 1 + L_Q]`, with zeros at the
    /// CLS and shadow key positions.
    pub fn flatten_bias(&self, bias: &BiasTensor) -> Result<Tensor> {
        let (n, heads, l_q, h, w) = bias.dims()?;
        let t = self.cfg.num_visual_tokens();
        if h * w != t {
            return Err(DfaError::Shape(format!(
                "bias grid {h}x{w} does not cover {t} visual tokens"
            )));
        }
        if heads != self.cfg.num_heads {
            return Err(DfaError::Config(format!(
                "bias has {heads} heads, encoder has {}",
                self.cfg.num_heads
            )));
        }
        let vals = bias.values.to_dtype(self.dtype)?.reshape((n, heads, l_q, t))?;
        let pad = Tensor::zeros((n, heads, l_q, 1 + l_q), self.dtype, &self.device)?;
        Ok(Tensor::cat(&[&vals, &pad], 3)?)
    }

    /// Bias-guided attention for shadow tokens at one layer:
    /// per head, `softmax(Q(x_sls) K(x_full)^T / sqrt(d_k) + B) V(x_full)`,
    /// heads concatenated, before the output projection. `Q`, `K` and `V`
    /// are the layer's own pre-norm and projection weights.
    ///
    /// `x_full` is ordered `[visual, CLS, shadow]` and `bias_flat` is
    /// `[N, H, L_Q, T + 1 + L_Q]`.
    pub fn shadow_attention_update(
        &self,
        x_sls: &Tensor,
        x_full: &Tensor,
        bias_flat: &Tensor,
        layer: usize,
    ) -> Result<Tensor> {
        if !self.cfg.inject_layers.contains(&layer) {
            return Err(DfaError::Config(format!("layer {layer} is not an injection layer")));
        }
        self.shadow_attend(x_sls, x_full, Some(bias_flat), layer)
    }

    /// Attention probabilities of the shadow update, `[N, H, L_Q, T+1+L_Q]`.
    pub fn shadow_attention_probs(
        &self,
        x_sls: &Tensor,
        x_full: &Tensor,
        bias_flat: Option<&Tensor>,
        layer: usize,
    ) -> Result<Tensor> {
        let block = self.block(layer)?;
        self.check_bias_heads(bias_flat)?;
        let heads = block.attn.heads;
        let q = split_heads(&block.attn.q.forward(&block.ln1.forward(x_sls)?)?, heads)?;
        let k = split_heads(&block.attn.k.forward(&block.ln1.forward(x_full)?)?, heads)?;
        attention_probs(&q, &k, bias_flat)
    }

    fn check_bias_heads(&self, bias_flat: Option<&Tensor>) -> Result<()> {
        if let Some(b) = bias_flat {
            let heads = b.dim(1)?;
            if heads != self.cfg.num_heads {
                return Err(DfaError::Config(format!(
                    "bias has {heads} heads, encoder has {}",
                    self.cfg.num_heads
                )));
            }
        }
        Ok(())
    }

    fn shadow_attend(
        &self,
        x_sls: &Tensor,
        x_full: &Tensor,
        bias_flat: Option<&Tensor>,
        layer: usize,
    ) -> Result<Tensor> {
        let block = self.block(layer)?;
        let p = self.shadow_attention_probs(x_sls, x_full, bias_flat, layer)?;
        let v = split_heads(&block.attn.v.forward(&block.ln1.forward(x_full)?)?, block.attn.heads)?;
        merge_heads(&p.matmul(&v)?)
    }

    /// One full block step for the shadow tokens given the layer's input
    /// hidden state `[N, 1+T, D]` (CLS first).
    fn shadow_block(&self, sls: &Tensor, hidden: &Tensor, bias_flat: Option<&Tensor>, layer: usize) -> Result<Tensor> {
        let block = self.block(layer)?;
        let t = self.cfg.num_visual_tokens();
        let full = Tensor::cat(&[&hidden.narrow(1, 1, t)?, &hidden.narrow(1, 0, 1)?, sls], 1)?;
        let attn = self.shadow_attend(sls, &full, bias_flat, layer)?;
        let sls = (sls + block.attn.out.forward(&attn)?)?;
        Ok((&sls + block.mlp.forward(&block.ln2.forward(&sls)?)?)?)
    }

    /// Runs the shadow tokens through the encoder on top of a finished
    /// frozen pass. Shadow tokens are copies of `[CLS]` at the first
    /// injection layer; from there they are updated at every layer, with
    /// the bias applied at injection layers. Returns post-norm shadow states
    /// `[N, L_Q, D]`.
    pub fn shadow_pass(&self, run: &EncoderTapSet, bias: &BiasTensor) -> Result<Tensor> {
        let w = self.weights()?;
        let first = self
            .first_shadow_layer()
            .ok_or_else(|| DfaError::Config("no injection layers configured".into()))?;
        let bias_flat = self.flatten_bias(bias)?;
        let l_q = bias_flat.dim(2)?;
        let start = &run.layer_inputs[&first];
        let (n, _, d) = start.dims3()?;
        let mut sls = start.narrow(1, 0, 1)?.broadcast_as((n, l_q, d))?.contiguous()?;
        for layer in first..=self.cfg.depth {
            let hidden = &run.layer_inputs[&layer];
            let b = self.cfg.inject_layers.contains(&layer).then_some(&bias_flat);
            sls = self.shadow_block(&sls, hidden, b, layer)?;
        }
        w.post_ln.forward(&sls)
    }

    /// Frozen forward followed by the shadow pass.
    pub fn forward_injected(&self, images: &Tensor, bias: &BiasTensor) -> Result<EncoderTapSet> {
        let mut run = self.forward_frozen(images)?;
        run.final_sls = Some(self.shadow_pass(&run, bias)?);
        Ok(run)
    }

    /// Vanilla self-attention sublayer output (before the output projection)
    /// of `layer` over an arbitrary token set, every token attending to
    /// every token. Used as a reference for the shadow update.
    pub fn vanilla_attention(&self, tokens: &Tensor, layer: usize) -> Result<Tensor> {
        let block = self.block(layer)?;
        let x = block.ln1.forward(tokens)?;
        block.attn.attend(&x, &x, None)
    }

    /// A full vanilla block step over an arbitrary token set.
    pub fn vanilla_block(&self, tokens: &Tensor, layer: usize) -> Result<Tensor> {
        self.block(layer)?.forward(tokens)
    }

    /// Input hidden state of `layer` recorded by [`Encoder::forward_frozen`]
    /// (available from the first injection layer onward).
    pub fn layer_input<'a>(&self, run: &'a EncoderTapSet, layer: usize) -> Option<&'a Tensor> {
        run.layer_inputs.get(&layer)
    }

    pub fn post_norm(&self, x: &Tensor) -> Result<Tensor> {
        self.weights()?.post_ln.forward(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn mini() -> Encoder {
        Encoder::seeded(EncoderConfig::miniature(), 3, DType::F32, Device::Cpu).unwrap()
    }

    #[test]
    fn miniature_tap_shapes() {
        let enc = mini();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let run = enc.forward_frozen(&x).unwrap();
        for l in [1, 2, 3] {
            assert_eq!(run.taps[&l].dims(), &[2, 16, 64]);
        }
        assert_eq!(run.final_cls.dims(), &[2, 64]);
        assert_eq!(run.final_visual.dims(), &[2, 16, 64]);
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let enc = mini();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward_frozen(&x), Err(DfaError::Shape(_))));
    }

    #[test]
    fn unloaded_encoder_refuses_forward() {
        let enc = Encoder::new(EncoderConfig::miniature(), DType::F32, Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward_frozen(&x), Err(DfaError::UninitializedEncoder)));
    }

    #[test]
    fn config_rejects_out_of_range_layers() {
        let mut cfg = EncoderConfig::miniature();
        cfg.tap_layers = vec![0];
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::miniature();
        cfg.inject_layers = vec![5];
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::miniature();
        cfg.image_size = 60;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_inject_layers_are_upper_half() {
        assert_eq!(EncoderConfig::default_inject_layers(4), vec![3, 4]);
        assert_eq!(EncoderConfig::vit_l14().inject_layers, EncoderConfig::default_inject_layers(24));
    }

    #[test]
    fn published_names_map_to_internal() {
        assert_eq!(
            map_published_name("vision_model.encoder.layers.11.self_attn.out_proj.bias").as_deref(),
            Some("encoder.blocks.11.attn.out.bias")
        );
        assert_eq!(
            map_published_name("vision_model.embeddings.class_embedding").as_deref(),
            Some("encoder.embed.cls")
        );
        assert_eq!(
            map_published_name("vision_model.pre_layrnorm.weight").as_deref(),
            Some("encoder.pre_ln.weight")
        );
        assert_eq!(map_published_name("text_model.embeddings.token_embedding.weight"), None);
        assert_eq!(map_published_name("visual_projection.weight"), None);
    }
}
