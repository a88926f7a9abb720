//! Named parameter sources and the flat checkpoint container.
//!
//! Every module builds itself by requesting named tensors from a
//! [`ParamSource`]. A [`VarStore`] hands out trainable [`Var`]s initialized
//! from a seeded stream; a [`TensorStore`] hands out constant tensors looked
//! up in a loaded checkpoint (or drawn from a seeded stream for reference
//! weights). The on-disk container is safetensors: a flat map from
//! parameter name to a dense array with its shape and dtype.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DfaError, Result};

/// Flat name → tensor map, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// PyTorch-style default for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

pub trait ParamSource {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
}

/// A prefixed view over a parameter source.
pub struct Scope<'a> {
    src: &'a mut dyn ParamSource,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(src: &'a mut dyn ParamSource, prefix: impl Into<String>) -> Self {
        Scope {
            src,
            prefix: prefix.into(),
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            src: &mut *self.src,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.src.get(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.src.dtype()
    }

    pub fn device(&self) -> &Device {
        self.src.device()
    }
}

fn host_tensor(values: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Trainable parameters, created on first request from a seeded stream.
pub struct VarStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        VarStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_map(&self) -> ParamMap {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite every variable from `map`. Every variable must be present
    /// with a matching shape; extra entries in `map` are ignored.
    pub fn assign_from(&self, map: &ParamMap) -> Result<()> {
        let missing: Vec<String> = self
            .vars
            .keys()
            .filter(|k| !map.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(DfaError::MissingParameters(missing));
        }
        for (name, var) in &self.vars {
            let src = &map[name];
            if src.dims() != var.dims() {
                return Err(DfaError::ShapeMismatch {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: src.dims().to_vec(),
                });
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

impl ParamSource for VarStore {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(DfaError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: v.dims().to_vec(),
                });
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let t = host_tensor(init.sample(&mut self.rng, n), shape, self.dtype, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

/// Constant parameters looked up by name.
///
/// In `Lookup` mode absent names are collected and reported together by
/// [`TensorStore::finish`]; in `Seeded` mode they are drawn from a seeded
/// stream, which is how reference weights are produced.
pub struct TensorStore {
    tensors: ParamMap,
    missing: Vec<String>,
    used: BTreeMap<String, ()>,
    rng: Option<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl TensorStore {
    pub fn lookup(tensors: ParamMap, dtype: DType, device: Device) -> Self {
        TensorStore {
            tensors,
            missing: Vec::new(),
            used: BTreeMap::new(),
            rng: None,
            dtype,
            device,
        }
    }

    pub fn seeded(seed: u64, dtype: DType, device: Device) -> Self {
        TensorStore {
            tensors: ParamMap::new(),
            missing: Vec::new(),
            used: BTreeMap::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device,
        }
    }

    /// Fails with every missing name if any request could not be served.
    /// Returns the tensors that were actually used, keyed by name.
    pub fn finish(self) -> Result<ParamMap> {
        if !self.missing.is_empty() {
            return Err(DfaError::MissingParameters(self.missing));
        }
        let used = self.used;
        Ok(self
            .tensors
            .into_iter()
            .filter(|(k, _)| used.contains_key(k))
            .collect())
    }
}

impl ParamSource for TensorStore {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(t) = self.tensors.get(name) {
            if t.dims() != shape {
                return Err(DfaError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            self.used.insert(name.to_string(), ());
            return Ok(t.to_dtype(self.dtype)?.to_device(&self.device)?);
        }
        match self.rng.as_mut() {
            Some(rng) => {
                let n = shape.iter().product();
                let t = host_tensor(init.sample(rng, n), shape, self.dtype, &self.device)?;
                self.tensors.insert(name.to_string(), t.clone());
                self.used.insert(name.to_string(), ());
                Ok(t)
            }
            None => {
                self.missing.push(name.to_string());
                Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
            }
        }
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

pub fn save_map(path: impl AsRef<Path>, map: &ParamMap) -> Result<()> {
    let path = path.as_ref();
    let hm: HashMap<String, Tensor> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&hm, path)?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>, device: &Device) -> Result<ParamMap> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DfaError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Ok(candle_core::safetensors::load(path, device)?
        .into_iter()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_stores_are_reproducible() {
        let mut a = VarStore::new(7, DType::F32, Device::Cpu);
        let mut b = VarStore::new(7, DType::F32, Device::Cpu);
        let ta = a.get("w", &[3, 4], Init::Normal(1.0)).unwrap();
        let tb = b.get("w", &[3, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn lookup_reports_all_missing_names() {
        let mut s = TensorStore::lookup(ParamMap::new(), DType::F32, Device::Cpu);
        let mut scope = Scope::new(&mut s, "enc");
        scope.get("a", &[2], Init::Zeros).unwrap();
        scope.pp("blk").get("b", &[2], Init::Zeros).unwrap();
        match s.finish() {
            Err(DfaError::MissingParameters(names)) => {
                assert_eq!(names, vec!["enc.a".to_string(), "enc.blk.b".to_string()])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lookup_rejects_shape_mismatch() {
        let mut map = ParamMap::new();
        map.insert("w".into(), Tensor::zeros((4, 3), DType::F32, &Device::Cpu).unwrap());
        let mut s = TensorStore::lookup(map, DType::F32, Device::Cpu);
        let err = s.get("w", &[3, 4], Init::Zeros).unwrap_err();
        assert!(matches!(err, DfaError::ShapeMismatch { ref name, .. } if name == "w"));
    }
}
