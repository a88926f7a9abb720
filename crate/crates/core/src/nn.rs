//! Small layer library built from primitive tensor ops so that every
//! operation has a backward pass.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{DfaError, Result};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(1.702 x)`, the CLIP activation.
    QuickGelu,
    Gelu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::QuickGelu => quick_gelu(x)?,
            Activation::Gelu => x.gelu()?,
        })
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(&(x * 1.702)?)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = s.get("weight", &[out_dim, in_dim], Init::fan_in(in_dim))?;
        let bias = s.get("bias", &[out_dim], Init::Zeros)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = s.get("weight", &[out_dim, in_dim], Init::fan_in(in_dim))?;
        Ok(Linear { weight, bias: None })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            weight: s.get("weight", &[dim], Init::Ones)?,
            bias: s.get("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(s: &mut Scope, dim: usize, hidden: usize, out: usize, act: Activation) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&mut s.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&mut s.pp("fc2"), hidden, out)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// `[N, L, H*dh] -> [N, H, L, dh]`
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, l, d) = x.dims3()?;
    if d % heads != 0 {
        return Err(DfaError::Shape(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    Ok(x.reshape((n, l, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `[N, H, L, dh] -> [N, L, H*dh]`
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, h, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, l, h * dh))?)
}

/// Per-head attention probabilities `softmax(q k^T / sqrt(dh) + bias)`.
///
/// `q`: `[N, H, Lq, dh]`, `k`: `[N, H, Lk, dh]`, `bias`: `[N, H, Lq, Lk]`.
pub fn attention_probs(q: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    softmax_last(&scores)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(s: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(DfaError::Config(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(&mut s.pp("q"), dim, dim)?,
            k: Linear::new(&mut s.pp("k"), dim, dim)?,
            v: Linear::new(&mut s.pp("v"), dim, dim)?,
            out: Linear::new(&mut s.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// Multi-head attention before the output projection: queries come from
    /// `xq`, keys and values from `xkv`. Returns `[N, Lq, D]`.
    pub fn attend(&self, xq: &Tensor, xkv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(xq)?, self.heads)?;
        let k = split_heads(&self.k.forward(xkv)?, self.heads)?;
        let v = split_heads(&self.v.forward(xkv)?, self.heads)?;
        let p = attention_probs(&q, &k, bias)?;
        merge_heads(&p.matmul(&v)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.attend(x, x, None)?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(s: &mut Scope, dim: usize, heads: usize, mlp_ratio: usize, act: Activation) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(&mut s.pp("ln1"), dim, 1e-5)?,
            attn: Attention::new(&mut s.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&mut s.pp("ln2"), dim, 1e-5)?,
            mlp: Mlp::new(&mut s.pp("mlp"), dim, dim * mlp_ratio, dim, act)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::grouped(s, in_ch, out_ch, kernel, stride, padding, 1, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn grouped(
        s: &mut Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch / groups * kernel * kernel;
        let weight = s.get(
            "weight",
            &[out_ch, in_ch / groups, kernel, kernel],
            Init::fan_in(fan_in),
        )?;
        let bias = if bias {
            Some(s.get("bias", &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Row-stochastic bilinear interpolation matrix `[out, inp]` with
/// half-pixel centers (no corner alignment).
pub fn interp_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut w = vec![0.0; out * inp];
    if out == inp {
        for i in 0..out {
            w[i * inp + i] = 1.0;
        }
        return w;
    }
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        w[o * inp + i0] += 1.0 - frac;
        w[o * inp + i1] += frac;
    }
    w
}

pub fn interp_matrix(out: usize, inp: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interp_weights(out, inp), (out, inp), device)?.to_dtype(dtype)?)
}

/// Bilinear resampling of the two trailing axes, written as a pair of
/// matrix products so it is linear and differentiable.
pub fn resample2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(DfaError::Shape(format!("resample2d needs rank >= 2, got {rank}")));
    }
    let in_h = x.dim(rank - 2)?;
    let in_w = x.dim(rank - 1)?;
    if in_h == out_h && in_w == out_w {
        return Ok(x.clone());
    }
    let rh = interp_matrix(out_h, in_h, x.dtype(), x.device())?;
    let rw = interp_matrix(out_w, in_w, x.dtype(), x.device())?;
    Ok(rh.broadcast_matmul(x)?.broadcast_matmul(&rw.t()?)?)
}

/// Cross-entropy of two-class logits `[N, 2]` against labels in {0, 1}.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, labels)?)
}

/// Probability of class 1 from `[N, 2]` logits.
pub fn fake_probability(logits: &Tensor) -> Result<Tensor> {
    Ok(softmax_last(logits)?.narrow(1, 1, 1)?.squeeze(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_rows_sum_to_one() {
        for (o, i) in [(7, 14), (14, 7), (5, 3), (16, 14)] {
            let w = interp_weights(o, i);
            for r in 0..o {
                let s: f64 = w[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_of_constant_is_constant() {
        let x = Tensor::ones((1, 2, 6, 6), DType::F64, &Device::Cpu).unwrap();
        let y = resample2d(&x, 4, 9).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 9]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_scalar_reference() {
        let mut store = crate::params::VarStore::new(1, DType::F64, Device::Cpu);
        let mut s = Scope::new(&mut store, "ln");
        let ln = LayerNorm::new(&mut s, 4, 1e-5).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean = 3.0;
        let var: f64 = [4.0, 1.0, 0.0, 9.0].iter().sum::<f64>() / 4.0;
        for (i, v) in [1.0, 2.0, 3.0, 6.0].iter().enumerate() {
            let expect = (v - mean) / (var + 1e-5f64).sqrt();
            assert!((y[0][i] - expect).abs() < 1e-12);
        }
    }
}
