//! Learnable multi-task loss weighting.

use candle_core::Tensor;

use crate::adapter::check_finite;
use crate::config::Ablation;
use crate::error::{DfaError, Result};
use crate::params::{Init, Scope};

pub const LOSS_WEIGHTS_PREFIX: &str = "loss_weights";

/// `ln(e - 1)`: the raw value whose softplus is exactly 1.
pub const UNIT_RAW: f64 = 0.541_324_854_612_918_1;

/// `ln(1 + e^x)` as `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Raw weights for the global, local and fusion losses; the effective
/// weight is `softplus(raw)`.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub raw_global: Tensor,
    pub raw_local: Tensor,
    pub raw_fusion: Tensor,
}

impl LossWeights {
    pub fn new(s: &mut Scope) -> Result<Self> {
        Ok(LossWeights {
            raw_global: s.get("raw_global", &[1], Init::Constant(UNIT_RAW))?,
            raw_local: s.get("raw_local", &[1], Init::Constant(UNIT_RAW))?,
            raw_fusion: s.get("raw_fusion", &[1], Init::Constant(UNIT_RAW))?,
        })
    }

    fn raws(&self) -> [&Tensor; 3] {
        [&self.raw_global, &self.raw_local, &self.raw_fusion]
    }

    /// Effective weights as differentiable scalars.
    pub fn effective(&self) -> Result<[Tensor; 3]> {
        let [g, l, f] = self.raws();
        Ok([
            softplus(g)?.squeeze(0)?,
            softplus(l)?.squeeze(0)?,
            softplus(f)?.squeeze(0)?,
        ])
    }

    pub fn effective_values(&self) -> Result<[f64; 3]> {
        let w = self.effective()?;
        let mut out = [0.0; 3];
        for (o, t) in out.iter_mut().zip(&w) {
            *o = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(out)
    }
}

/// Per-stream cross-entropy losses; `None` for inactive streams.
#[derive(Debug, Clone)]
pub struct StreamLosses {
    pub global: Option<Tensor>,
    pub local: Option<Tensor>,
    pub fusion: Option<Tensor>,
}

impl StreamLosses {
    pub fn values(&self) -> Result<[Option<f64>; 3]> {
        let v = |t: &Option<Tensor>| -> Result<Option<f64>> {
            t.as_ref()
                .map(|t| Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?))
                .transpose()
        };
        Ok([v(&self.global)?, v(&self.local)?, v(&self.fusion)?])
    }
}

/// `w_global * loss1 + w_local * loss2 + w_fusion * loss3` over the
/// streams that are both present and enabled. Disabled streams do not
/// touch their weight, so it receives no gradient.
pub fn total_loss(losses: &StreamLosses, w: &LossWeights, ablation: Ablation) -> Result<Tensor> {
    let [wg, wl, wf] = w.effective()?;
    let terms = [
        (ablation.global_on, &losses.global, wg, "global"),
        (ablation.local_on, &losses.local, wl, "local"),
        (ablation.ifc_on, &losses.fusion, wf, "fusion"),
    ];
    let mut total: Option<Tensor> = None;
    for (on, loss, weight, name) in terms {
        let Some(loss) = loss.as_ref().filter(|_| on) else {
            continue;
        };
        if check_finite(loss, name).is_err() {
            let shown = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            return Err(DfaError::NonFinite(format!("{name} stream loss is {shown}")));
        }
        let term = (weight * loss)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| DfaError::Config("no active stream contributes to the loss".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VarStore;
    use candle_core::{DType, Device};

    fn scalar(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn weights() -> (VarStore, LossWeights) {
        let mut vs = VarStore::new(0, DType::F64, Device::Cpu);
        let w = LossWeights::new(&mut Scope::new(&mut vs, LOSS_WEIGHTS_PREFIX)).unwrap();
        (vs, w)
    }

    fn losses(a: f64, b: f64, c: f64) -> StreamLosses {
        StreamLosses {
            global: Some(scalar(a)),
            local: Some(scalar(b)),
            fusion: Some(scalar(c)),
        }
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn weights_start_at_one() {
        let (_, w) = weights();
        for v in w.effective_values().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_weights_sum_losses() {
        let (_, w) = weights();
        let t = total_loss(&losses(0.5, 0.3, 0.2), &w, Ablation::FULL).unwrap();
        assert!((value(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ablated_stream_is_masked() {
        let (_, w) = weights();
        let ab = Ablation {
            local_on: false,
            ..Ablation::FULL
        };
        let t = total_loss(&losses(0.5, 0.3, 0.2), &w, ab).unwrap();
        assert!((value(&t) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (_, w) = weights();
        let r = total_loss(&losses(f64::NAN, 0.3, 0.2), &w, Ablation::FULL);
        assert!(matches!(r, Err(DfaError::NonFinite(_))));
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, 0.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-300);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
        assert!((softplus_scalar(UNIT_RAW) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_gradient_matches_finite_difference() {
        let (vs, w) = weights();
        let l = losses(0.5, 0.3, 0.2);
        let t = total_loss(&l, &w, Ablation::FULL).unwrap();
        let grads = t.backward().unwrap();
        let g = grads
            .get(vs.var("loss_weights.raw_global").unwrap().as_tensor())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        let h = 1e-3;
        let fd = 0.5 * (softplus_scalar(UNIT_RAW + h) - softplus_scalar(UNIT_RAW - h)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-4, "{g} vs {fd}");
    }
}
