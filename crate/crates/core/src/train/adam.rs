use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{DfaError, Result};
use crate::params::ParamMap;

/// Adam with bias correction and exportable moments. Variables without a
/// gradient in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    /// Names of variables that have optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    pub fn step(&mut self, vars: &BTreeMap<String, Var>, grads: &GradStore) -> Result<()> {
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (&g2 * (1.0 - self.beta2))?)?,
                None => (&g2 * (1.0 - self.beta2))?,
            };
            let t = self.t.get(name).copied().unwrap_or(0) + 1;
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            self.t.insert(name.clone(), t);
        }
        Ok(())
    }

    /// Flat state: `m.<name>`, `v.<name>` and a scalar `t.<name>` step count.
    pub fn state_map(&self) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for (name, m) in &self.m {
            let dev = m.device();
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), self.v[name].clone());
            out.insert(format!("t.{name}"), Tensor::new(&[self.t[name] as u32], dev)?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, map: &ParamMap, vars: &BTreeMap<String, Var>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.t.clear();
        for (key, t) in map {
            let Some(name) = key.strip_prefix("m.") else {
                continue;
            };
            let var = vars
                .get(name)
                .ok_or_else(|| DfaError::Data(format!("optimizer state for unknown parameter `{name}`")))?;
            let v = map
                .get(&format!("v.{name}"))
                .ok_or_else(|| DfaError::MissingParameters(vec![format!("v.{name}")]))?;
            let steps = map
                .get(&format!("t.{name}"))
                .ok_or_else(|| DfaError::MissingParameters(vec![format!("t.{name}")]))?
                .to_vec1::<u32>()?[0];
            if t.dims() != var.dims() || v.dims() != var.dims() {
                return Err(DfaError::ShapeMismatch {
                    name: name.to_string(),
                    expected: var.dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            self.m.insert(name.to_string(), t.to_dtype(var.dtype())?);
            self.v.insert(name.to_string(), v.to_dtype(var.dtype())?);
            self.t.insert(name.to_string(), steps as u64);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let x = Var::from_vec(vec![1.0f64, -2.0], 2, &Device::Cpu).unwrap();
        let mut vars = BTreeMap::new();
        vars.insert("x".to_string(), x.clone());
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&vars, &grads).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip() {
        let x = Var::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let mut vars = BTreeMap::new();
        vars.insert("x".to_string(), x.clone());
        let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
        let mut opt = Adam::new(0.01);
        opt.step(&vars, &loss.backward().unwrap()).unwrap();
        let map = opt.state_map().unwrap();
        let mut other = Adam::new(0.01);
        other.load_state(&map, &vars).unwrap();
        assert_eq!(other.t, opt.t);
        assert_eq!(
            other.m["x"].to_vec1::<f32>().unwrap(),
            opt.m["x"].to_vec1::<f32>().unwrap()
        );
    }
}
