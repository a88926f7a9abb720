//! Multi-task training, scoring and module ablation.

pub mod adam;
pub mod checkpoint;
pub mod loss;

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, DfaConfig};
use crate::data::{Batch, FrameSample};
use crate::encoder::Encoder;
use crate::error::{DfaError, Result};
use crate::metrics::report::AblationRow;
use crate::metrics::{auc, eer, ScoreRow, ScoreTable};
use crate::model::{Dfa, EncoderRef};

use adam::Adam;
use checkpoint::{save_bundle, BundleMeta, LoadedBundle};
use loss::total_loss;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_DIR: &str = "checkpoints/best";
pub const LAST_DIR: &str = "checkpoints/last";

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Global, local and fusion losses; `None` for inactive streams.
    pub losses: [Option<f64>; 3],
    pub total: f64,
    pub correct: usize,
    pub count: usize,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    pub loss_global: Option<f64>,
    pub loss_local: Option<f64>,
    pub loss_fusion: Option<f64>,
    pub loss_total: f64,
    pub weight_global: f64,
    pub weight_local: f64,
    pub weight_fusion: f64,
    pub train_accuracy: f64,
    pub val_auc: Option<f64>,
    pub val_eer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: usize,
}

pub struct Trainer {
    model: Dfa,
    opt: Adam,
    encoder_ref: EncoderRef,
    step: usize,
    epoch: usize,
}

/// Shuffle stream of one epoch, a pure function of seed and epoch.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64((seed ^ 0x5eed_0fda_7a00).wrapping_add(epoch as u64))
}

impl Trainer {
    pub fn new(model: Dfa, encoder_ref: EncoderRef) -> Self {
        let cfg = model.config();
        let opt = Adam::new(cfg.train.lr);
        Trainer {
            model,
            opt,
            encoder_ref,
            step: 0,
            epoch: 0,
        }
    }

    /// Continues from a saved bundle after its last completed epoch.
    pub fn resume(b: LoadedBundle) -> Self {
        Trainer {
            opt: b.optimizer,
            encoder_ref: b.meta.encoder,
            step: b.meta.step,
            epoch: b.meta.epoch + 1,
            model: b.model,
        }
    }

    pub fn model(&self) -> &Dfa {
        &self.model
    }

    pub fn into_model(self) -> Dfa {
        self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn cfg(&self) -> &DfaConfig {
        self.model.config()
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let ablation = self.cfg().train.ablation;
        let out = self.model.forward(batch, ablation)?;
        let losses = self.model.stream_losses(&out, &batch.labels)?;
        let total = total_loss(&losses, self.model.loss_weights(), ablation)?;
        let total_value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = total.backward()?;
        self.opt.step(self.model.vars().vars(), &grads)?;
        self.step += 1;
        let scores = out.score.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let correct = scores
            .iter()
            .zip(&batch.label_values)
            .filter(|(s, &l)| (**s >= 0.5) == (l == 1))
            .count();
        Ok(StepStats {
            losses: losses.values()?,
            total: total_value,
            correct,
            count: batch.len(),
        })
    }

    fn step_budget_left(&self) -> bool {
        let cap = self.cfg().train.max_steps;
        cap == 0 || self.step < cap
    }

    /// One pass over `train` in a seeded order; returns the step-averaged
    /// statistics of the epoch.
    pub fn run_epoch(&mut self, train: &[FrameSample]) -> Result<StepStats> {
        if train.is_empty() {
            return Err(DfaError::Config("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.cfg().train.seed, self.epoch));
        let bs = self.cfg().train.batch_size;
        let dtype = self.model.dtype();
        let mut sums = [0.0f64; 3];
        let mut seen = [false; 3];
        let (mut total, mut correct, mut count, mut steps) = (0.0, 0, 0, 0);
        for chunk in order.chunks(bs) {
            if !self.step_budget_left() {
                break;
            }
            let refs: Vec<&FrameSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&refs, dtype, &Device::Cpu)?;
            let s = self.train_step(&batch)?;
            for k in 0..3 {
                if let Some(v) = s.losses[k] {
                    sums[k] += v;
                    seen[k] = true;
                }
            }
            total += s.total;
            correct += s.correct;
            count += s.count;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        Ok(StepStats {
            losses: [0, 1, 2].map(|k| seen[k].then(|| sums[k] / n)),
            total: total / n,
            correct,
            count,
        })
    }

    /// Trains for the configured epochs (or until the step cap), logging
    /// every epoch. With `out`, the log goes to `out/train_log.jsonl` and
    /// the best-validation and last bundles under `out/checkpoints/`.
    pub fn fit(&mut self, train: &[FrameSample], val: &[FrameSample], out: Option<&Path>) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(DfaError::Config("training split is empty".into()));
        }
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| DfaError::io(dir, e))?;
                let p = dir.join(LOG_FILE);
                Some((std::fs::File::create(&p).map_err(|e| DfaError::io(&p, e))?, p))
            }
            None => None,
        };
        let epochs = self.cfg().train.epochs;
        let ablation = self.cfg().train.ablation;
        let mut log = Vec::new();
        let mut best: Option<(f64, usize)> = None;
        while self.epoch < epochs && self.step_budget_left() {
            let stats = self.run_epoch(train)?;
            let (val_auc, val_eer) = if val.is_empty() {
                (None, None)
            } else {
                let table = score_samples(&self.model, val, ablation, self.cfg().train.batch_size)?;
                match (auc(&table), eer(&table)) {
                    (Ok(a), Ok((e, _))) => (Some(a), Some(e)),
                    _ => (None, None),
                }
            };
            let w = self.model.loss_weights().effective_values()?;
            let entry = EpochLog {
                epoch: self.epoch,
                step: self.step,
                loss_global: stats.losses[0],
                loss_local: stats.losses[1],
                loss_fusion: stats.losses[2],
                loss_total: stats.total,
                weight_global: w[0],
                weight_local: w[1],
                weight_fusion: w[2],
                train_accuracy: stats.correct as f64 / stats.count.max(1) as f64,
                val_auc,
                val_eer,
            };
            log::info!(
                "epoch {} step {} loss {:.5} acc {:.3} val_auc {:?}",
                entry.epoch,
                entry.step,
                entry.loss_total,
                entry.train_accuracy,
                entry.val_auc
            );
            if let Some((f, p)) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &entry)?;
                f.write_all(b"\n").map_err(|e| DfaError::io(&*p, e))?;
            }
            let criterion = val_auc.unwrap_or(-stats.total);
            let improved = best.is_none_or(|(b, _)| criterion > b);
            if improved {
                best = Some((criterion, self.epoch));
            }
            if let Some(dir) = out {
                let meta = self.meta(val_auc)?;
                if improved {
                    save_bundle(&dir.join(BEST_DIR), &self.model, &self.opt, &meta)?;
                }
                save_bundle(&dir.join(LAST_DIR), &self.model, &self.opt, &meta)?;
            }
            log.push(entry);
            self.epoch += 1;
        }
        Ok(TrainOutcome {
            best_epoch: best.map(|b| b.1).unwrap_or(0),
            steps: self.step,
            log,
        })
    }

    fn meta(&self, val_auc: Option<f64>) -> Result<BundleMeta> {
        Ok(BundleMeta {
            epoch: self.epoch,
            step: self.step,
            config_hash: self.cfg().hash()?,
            encoder: self.encoder_ref.clone(),
            val_auc,
        })
    }
}

/// Frame scores for `samples`, in order.
pub fn score_samples(model: &Dfa, samples: &[FrameSample], ablation: Ablation, batch_size: usize) -> Result<ScoreTable> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&FrameSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, model.dtype(), &Device::Cpu)?;
        let scores = model.forward(&batch, ablation)?.score.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for (s, x) in scores.into_iter().zip(chunk) {
            rows.push(ScoreRow {
                sample_id: x.sample_id.clone(),
                video_id: x.video_id.clone(),
                label: x.label,
                score: s.clamp(0.0, 1.0),
            });
        }
    }
    ScoreTable::new(rows)
}

/// Trains a fresh model per toggle pattern (three single-module
/// ablations, then the full model) and scores it on `eval`.
pub fn ablate(
    base: &DfaConfig,
    encoder: &Encoder,
    encoder_ref: &EncoderRef,
    train: &[FrameSample],
    eval: &[FrameSample],
) -> Result<Vec<AblationRow>> {
    Ablation::table_patterns()
        .into_iter()
        .map(|pattern| {
            let mut cfg = base.clone();
            cfg.train.ablation = pattern;
            let model = Dfa::new(&cfg, encoder.clone())?;
            let mut t = Trainer::new(model, encoder_ref.clone());
            t.fit(train, &[], None)?;
            let table = score_samples(t.model(), eval, pattern, cfg.train.batch_size)?;
            let (e, _) = eer(&table)?;
            let row = AblationRow {
                global_on: pattern.global_on,
                local_on: pattern.local_on,
                ifc_on: pattern.ifc_on,
                auc: auc(&table)?,
                eer: e,
            };
            log::info!("ablation {pattern:?}: auc {:.4} eer {:.4}", row.auc, row.eer);
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_samples;
    use crate::model::build_encoder;

    fn setup(max_steps: usize) -> (DfaConfig, Trainer, Vec<FrameSample>) {
        let cfg = DfaConfig::miniature()
            .with_overrides(&[format!("max_steps={max_steps}"), "epochs=2".to_string()])
            .unwrap();
        let (enc, r) = build_encoder(&cfg, &Device::Cpu).unwrap();
        let t = Trainer::new(Dfa::new(&cfg, enc).unwrap(), r);
        (cfg, t, synthetic_samples(8, 64, 5, [0.5; 3], [0.5; 3]))
    }

    #[test]
    fn step_cap_and_log() {
        let (_, mut t, data) = setup(1);
        let out = t.fit(&data, &data, None).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].loss_total.is_finite());
        assert!(out.log[0].val_auc.is_some());
    }

    #[test]
    fn empty_train_split_is_config_error() {
        let (_, mut t, _) = setup(1);
        assert!(matches!(t.fit(&[], &[], None), Err(DfaError::Config(_))));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mut t, data) = setup(2);
        t.fit(&data, &[], Some(dir.path())).unwrap();
        let loaded = checkpoint::load_bundle(&dir.path().join(LAST_DIR)).unwrap();
        assert_eq!(loaded.meta.step, 2);
        let a = score_samples(t.model(), &data, Ablation::FULL, 4).unwrap();
        let b = score_samples(&loaded.model, &data, Ablation::FULL, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            loaded.optimizer.state_names().collect::<Vec<_>>(),
            t.optimizer().state_names().collect::<Vec<_>>()
        );
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
    }
}
