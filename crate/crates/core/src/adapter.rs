//! Trainable global adapter: a small vision transformer that fuses tapped
//! encoder features, produces the attention bias for the encoder's shadow
//! tokens, and emits the global token sequence plus an auxiliary prediction.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderTapSet;
use crate::error::{DfaError, Result};
use crate::nn::{resample2d, Activation, Block, Conv2d, LayerNorm, Linear, Mlp};
use crate::params::{Init, Scope};

pub const ADAPTER_PREFIX: &str = "adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub depth: usize,
    /// Adapter width, `D_in`.
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// Number of query tokens and of shadow tokens, `L_Q`.
    pub num_query_tokens: usize,
    /// Projected width summed over in the bias, `D_out`.
    pub mlp_out_dim: usize,
    /// Bias heads; must equal the encoder head count.
    pub num_bias_heads: usize,
    /// 1-based adapter layers receiving fused features.
    pub fuse_in_layers: Vec<usize>,
    /// 1-based encoder layers feeding `fuse_in_layers`, pairwise.
    pub source_tap_layers: Vec<usize>,
    /// Whether the adapter also embeds the raw image with its own patch
    /// embedding (otherwise it starts from positional embeddings only).
    #[serde(default = "yes")]
    pub use_image_patches: bool,
}

fn yes() -> bool {
    true
}

impl AdapterConfig {
    pub fn miniature() -> Self {
        AdapterConfig {
            depth: 3,
            embed_dim: 32,
            num_heads: 2,
            patch_size: 16,
            num_query_tokens: 4,
            mlp_out_dim: 8,
            num_bias_heads: 4,
            fuse_in_layers: vec![1, 2, 3],
            source_tap_layers: vec![1, 2, 3],
            use_image_patches: true,
        }
    }

    /// ViT-Tiny-sized adapter for a ViT-L/14 encoder.
    pub fn tiny_for_vit_l14() -> Self {
        AdapterConfig {
            depth: 12,
            embed_dim: 192,
            num_heads: 3,
            patch_size: 14,
            num_query_tokens: 4,
            mlp_out_dim: 8,
            num_bias_heads: 16,
            fuse_in_layers: vec![1, 2, 3],
            source_tap_layers: vec![1, 8, 15],
            use_image_patches: true,
        }
    }

    pub fn validate(&self, encoder_heads: usize, encoder_taps: &[usize], image_size: usize) -> Result<()> {
        if self.fuse_in_layers.len() != self.source_tap_layers.len() {
            return Err(DfaError::Config(format!(
                "fuse_in_layers ({}) and source_tap_layers ({}) differ in length",
                self.fuse_in_layers.len(),
                self.source_tap_layers.len()
            )));
        }
        if self.num_bias_heads != encoder_heads {
            return Err(DfaError::Config(format!(
                "num_bias_heads {} must equal encoder heads {encoder_heads}",
                self.num_bias_heads
            )));
        }
        if let Some(l) = self.fuse_in_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(DfaError::Config(format!("fuse_in_layers entry {l} outside [1, {}]", self.depth)));
        }
        if let Some(l) = self.source_tap_layers.iter().find(|l| !encoder_taps.contains(l)) {
            return Err(DfaError::Config(format!("source tap layer {l} is not an encoder tap layer")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(DfaError::Config("adapter embed_dim not divisible by num_heads".into()));
        }
        if self.patch_size == 0 || !image_size.is_multiple_of(self.patch_size) {
            return Err(DfaError::Config(format!(
                "adapter patch_size {} does not divide image size {image_size}",
                self.patch_size
            )));
        }
        if self.num_query_tokens == 0 || self.mlp_out_dim == 0 {
            return Err(DfaError::Config("num_query_tokens and mlp_out_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Attention bias `[N, H_attn, L_Q, h, w]`.
#[derive(Debug, Clone)]
pub struct BiasTensor {
    pub values: Tensor,
}

impl BiasTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 5 {
            return Err(DfaError::Shape(format!(
                "bias must be [N,H,L_Q,h,w], got {:?}",
                values.dims()
            )));
        }
        Ok(BiasTensor { values })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        Ok(self.values.dims5()?)
    }
}

/// Global token sequence `[N, T_g, D_f]` and auxiliary logits `[N, 2]`.
#[derive(Debug, Clone)]
pub struct GlobalFeatures {
    pub g_fmp: Tensor,
    pub aux_logits: Tensor,
}

/// Adapter token states between blocks.
#[derive(Debug, Clone)]
pub struct AdapterStates {
    /// Query tokens `[N, L_Q, D_in]`.
    pub queries: Tensor,
    /// Visual tokens `[N, T_a, D_in]`.
    pub visual: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdapterOutput {
    /// Bias resampled onto the encoder token grid.
    pub bias: BiasTensor,
    pub states: AdapterStates,
}

#[derive(Debug, Clone)]
pub struct GlobalAdapter {
    cfg: AdapterConfig,
    grid: usize,
    patch: Conv2d,
    pos: Tensor,
    query_embed: Tensor,
    fuse: Vec<Conv2d>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    mlp_q: Mlp,
    mlp_v: Mlp,
    sls_proj: Linear,
    token_proj: Linear,
    aux_head: Linear,
}

impl GlobalAdapter {
    pub fn new(
        s: &mut Scope,
        cfg: &AdapterConfig,
        encoder_dim: usize,
        image_size: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let grid = image_size / cfg.patch_size;
        let patch = Conv2d::new(&mut s.pp("patch"), 3, d, cfg.patch_size, cfg.patch_size, 0, true)?;
        let pos = s.get("pos", &[grid * grid, d], Init::Normal(0.02))?;
        let query_embed = s.get("query_embed", &[cfg.num_query_tokens, d], Init::Normal(0.5))?;
        let mut fuse = Vec::new();
        for j in 0..cfg.fuse_in_layers.len() {
            let mut f = s.pp("fuse");
            fuse.push(Conv2d::new(&mut f.pp(j), encoder_dim, d, 1, 1, 0, false)?);
        }
        let mut blocks = Vec::new();
        for i in 0..cfg.depth {
            let mut b = s.pp("blocks");
            blocks.push(Block::new(&mut b.pp(i), d, cfg.num_heads, 4, Activation::Gelu)?);
        }
        let norm = LayerNorm::new(&mut s.pp("norm"), d, 1e-5)?;
        let proj = cfg.num_bias_heads * cfg.mlp_out_dim;
        let hidden = 2 * cfg.mlp_out_dim;
        let mlp_q = Mlp::new(&mut s.pp("mlp_q"), d, hidden, proj, Activation::Gelu)?;
        let mlp_v = Mlp::new(&mut s.pp("mlp_v"), d, hidden, proj, Activation::Gelu)?;
        let sls_proj = Linear::new(&mut s.pp("sls_proj"), encoder_dim, feature_dim)?;
        let token_proj = Linear::new(&mut s.pp("token_proj"), d, feature_dim)?;
        let aux_head = Linear::new(&mut s.pp("aux_head"), feature_dim, 2)?;
        Ok(GlobalAdapter {
            cfg: cfg.clone(),
            grid,
            patch,
            pos,
            query_embed,
            fuse,
            blocks,
            norm,
            mlp_q,
            mlp_v,
            sls_proj,
            token_proj,
            aux_head,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Initial token states before the first block.
    pub fn initial_states(&self, images: &Tensor) -> Result<AdapterStates> {
        let n = images.dim(0)?;
        let d = self.cfg.embed_dim;
        let t = self.grid * self.grid;
        let visual = if self.cfg.use_image_patches {
            let x = images.to_dtype(self.pos.dtype())?;
            self.patch
                .forward(&x)?
                .flatten_from(2)?
                .transpose(1, 2)?
                .broadcast_add(&self.pos)?
        } else {
            self.pos.unsqueeze(0)?.broadcast_as((n, t, d))?.contiguous()?
        };
        let queries = self
            .query_embed
            .unsqueeze(0)?
            .broadcast_as((n, self.cfg.num_query_tokens, d))?
            .contiguous()?;
        Ok(AdapterStates { queries, visual })
    }

    /// Projects one tapped token sequence `[N, T, D_enc]` into the adapter's
    /// visual-token layout `[N, T_a, D_in]`: reshape to a `[N, D_enc, h', w']`
    /// map, 1x1 convolution, bilinear resampling to the adapter grid.
    pub fn project_tap(&self, slot: usize, tap: &Tensor) -> Result<Tensor> {
        let (n, t, d) = tap.dims3()?;
        let side = (t as f64).sqrt().round() as usize;
        if side * side != t {
            return Err(DfaError::Shape(format!("{t} tapped tokens do not form a square grid")));
        }
        let conv = self
            .fuse
            .get(slot)
            .ok_or_else(|| DfaError::Config(format!("no fusion slot {slot}")))?;
        let map = tap
            .to_dtype(self.pos.dtype())?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, d, side, side))?;
        let projected = resample2d(&conv.forward(&map)?, self.grid, self.grid)?;
        let (_, c, h, w) = projected.dims4()?;
        if h * w != self.grid * self.grid {
            return Err(DfaError::Shape(format!("fused grid {h}x{w} != adapter grid {}", self.grid)));
        }
        Ok(projected.reshape((n, c, h * w))?.transpose(1, 2)?)
    }

    /// Adds every tap routed to adapter `layer` (1-based) into the visual
    /// tokens entering that layer.
    pub fn fuse_multilevel(&self, taps: &EncoderTapSet, layer: usize, states: AdapterStates) -> Result<AdapterStates> {
        let mut visual = states.visual;
        for (slot, (&into, src)) in self
            .cfg
            .fuse_in_layers
            .iter()
            .zip(&self.cfg.source_tap_layers)
            .enumerate()
        {
            if into != layer {
                continue;
            }
            let tap = taps
                .taps
                .get(src)
                .ok_or_else(|| DfaError::Shape(format!("encoder tap for layer {src} missing")))?;
            visual = (visual + self.project_tap(slot, tap)?)?;
        }
        Ok(AdapterStates {
            queries: states.queries,
            visual,
        })
    }

    fn run_block(&self, idx: usize, states: AdapterStates) -> Result<AdapterStates> {
        let l_q = self.cfg.num_query_tokens;
        let x = Tensor::cat(&[&states.queries, &states.visual], 1)?;
        let x = self.blocks[idx].forward(&x)?;
        let t = x.dim(1)? - l_q;
        Ok(AdapterStates {
            queries: x.narrow(1, 0, l_q)?,
            visual: x.narrow(1, l_q, t)?,
        })
    }

    /// Full adapter pass; returns the bias on an `encoder_grid` square grid.
    pub fn forward(&self, images: &Tensor, taps: &EncoderTapSet, encoder_grid: usize) -> Result<AdapterOutput> {
        let mut states = self.initial_states(images)?;
        for i in 0..self.cfg.depth {
            states = self.fuse_multilevel(taps, i + 1, states)?;
            states = self.run_block(i, states)?;
        }
        let states = AdapterStates {
            queries: self.norm.forward(&states.queries)?,
            visual: self.norm.forward(&states.visual)?,
        };
        let (n, t, d) = states.visual.dims3()?;
        let v_map = states
            .visual
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, d, self.grid, self.grid))?;
        debug_assert_eq!(t, self.grid * self.grid);
        let bias = self.compute_bias(&states.queries, &v_map)?;
        let bias = resample_bias(&bias, encoder_grid)?;
        Ok(AdapterOutput { bias, states })
    }

    /// `B[n,a,q,i,j] = sum_d Q'[n,q,a,d] * V'[n,a,d,i,j]` with
    /// `Q' = MLP_q(q_attn)` and `V' = MLP_v(v_attn)`, the MLP outputs split
    /// into `H_attn` heads of `D_out`.
    pub fn compute_bias(&self, q_attn: &Tensor, v_attn: &Tensor) -> Result<BiasTensor> {
        let (n, l_q, _) = q_attn.dims3()?;
        let (nv, d_in, h, w) = v_attn.dims4()?;
        if nv != n {
            return Err(DfaError::Shape(format!("batch mismatch {n} vs {nv}")));
        }
        let heads = self.cfg.num_bias_heads;
        let d_out = self.cfg.mlp_out_dim;
        let q = self.mlp_q.forward(q_attn)?.reshape((n, l_q, heads, d_out))?;
        let v_tokens = v_attn.reshape((n, d_in, h * w))?.transpose(1, 2)?;
        let v = self
            .mlp_v
            .forward(&v_tokens)?
            .reshape((n, h * w, heads, d_out))?
            .permute((0, 2, 3, 1))?
            .reshape((n, heads, d_out, h, w))?;
        let bias = bias_from_projections(&q, &v)?;
        check_finite(&bias.values, "global adapter bias")?;
        Ok(bias)
    }

    /// Global token sequence: projected shadow states followed by projected
    /// adapter visual tokens, plus mean-pooled auxiliary logits.
    pub fn produce_global_features(&self, final_sls: &Tensor, adapter_tokens: &Tensor) -> Result<GlobalFeatures> {
        let sls = self.sls_proj.forward(&final_sls.to_dtype(adapter_tokens.dtype())?)?;
        let tok = self.token_proj.forward(adapter_tokens)?;
        let g_fmp = Tensor::cat(&[&sls, &tok], 1)?;
        let aux_logits = self.aux_head.forward(&g_fmp.mean(1)?)?;
        Ok(GlobalFeatures { g_fmp, aux_logits })
    }
}

/// The bias contraction on already projected inputs: `q_proj`
/// `[N, L_Q, H, D_out]`, `v_proj` `[N, H, D_out, h, w]`.
pub fn bias_from_projections(q_proj: &Tensor, v_proj: &Tensor) -> Result<BiasTensor> {
    let (n, l_q, heads, d_out) = q_proj.dims4()?;
    let (nv, hv, dv, h, w) = v_proj.dims5()?;
    if (nv, hv, dv) != (n, heads, d_out) {
        return Err(DfaError::Shape(format!(
            "projection shapes disagree: q {:?}, v {:?}",
            q_proj.dims(),
            v_proj.dims()
        )));
    }
    let q = q_proj.permute((0, 2, 1, 3))?.contiguous()?;
    let v = v_proj.reshape((n, heads, d_out, h * w))?;
    let b = q.matmul(&v)?.reshape((n, heads, l_q, h, w))?;
    BiasTensor::new(b)
}

/// Resamples a bias onto a `grid x grid` layout (identity when it already
/// matches).
pub fn resample_bias(bias: &BiasTensor, grid: usize) -> Result<BiasTensor> {
    let (n, heads, l_q, h, w) = bias.dims()?;
    if h == grid && w == grid {
        return Ok(bias.clone());
    }
    let flat = bias.values.reshape((n, heads * l_q, h, w))?;
    let out = resample2d(&flat, grid, grid)?.reshape((n, heads, l_q, grid, grid))?;
    BiasTensor::new(out)
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.detach().abs()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(DfaError::NonFinite(what.to_string()))
    }
}
