//! Fused-feature export for external embedding tools.

use std::path::Path;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, FrameSample};
use crate::error::{DfaError, Result};
use crate::model::Dfa;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub label: u8,
    pub features: Vec<f32>,
}

/// Picks `n_per_class` samples of each class with a seeded shuffle; reals
/// first, each class in shuffled order.
pub fn select_per_class(samples: &[FrameSample], n_per_class: usize, seed: u64) -> Result<Vec<&FrameSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reals: Vec<&FrameSample> = samples.iter().filter(|s| s.label == 0).collect();
    let fakes: Vec<&FrameSample> = samples.iter().filter(|s| s.label == 1).collect();
    if reals.len() < n_per_class || fakes.len() < n_per_class {
        return Err(DfaError::InsufficientSamples {
            requested: n_per_class,
            real: reals.len(),
            fake: fakes.len(),
        });
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for mut class in [reals, fakes] {
        class.shuffle(&mut rng);
        out.extend(class.into_iter().take(n_per_class));
    }
    Ok(out)
}

/// Pooled fusion features of a balanced random subset.
pub fn export_features(
    model: &Dfa,
    samples: &[FrameSample],
    n_per_class: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<FeatureRow>> {
    let ablation = model.config().train.ablation;
    if !ablation.ifc_on {
        return Err(DfaError::Config("feature export needs the fusion classifier (ifc_on = true)".into()));
    }
    let chosen = select_per_class(samples, n_per_class, seed)?;
    let mut rows = Vec::with_capacity(chosen.len());
    for chunk in chosen.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, model.dtype(), &Device::Cpu)?;
        let out = model.forward(&batch, ablation)?;
        let pooled = out.fused.expect("fusion enabled").pooled.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (x, f) in chunk.iter().zip(pooled) {
            rows.push(FeatureRow {
                sample_id: x.sample_id.clone(),
                label: x.label,
                features: f,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `sample_id,label,f0,...,f{D-1}`.
pub fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DfaError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone(), r.label.to_string()];
        rec.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| DfaError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_samples;

    #[test]
    fn insufficient_samples_reports_counts() {
        let s = synthetic_samples(5, 16, 0, [0.5; 3], [0.5; 3]);
        match select_per_class(&s, 3, 0) {
            Err(DfaError::InsufficientSamples { requested, real, fake }) => {
                assert_eq!((requested, real, fake), (3, 3, 2));
            }
            other => panic!("unexpected {other:?}", other = other.map(|v| v.len())),
        }
    }

    #[test]
    fn selection_is_balanced_and_seeded() {
        let s = synthetic_samples(12, 16, 0, [0.5; 3], [0.5; 3]);
        let a: Vec<_> = select_per_class(&s, 2, 9).unwrap().iter().map(|x| x.sample_id.clone()).collect();
        let b: Vec<_> = select_per_class(&s, 2, 9).unwrap().iter().map(|x| x.sample_id.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }
}
