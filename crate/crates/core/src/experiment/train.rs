use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment, stack, AugmentConfig, Sample};
use crate::diet::{diet_step, init_head, DietBatch, DietHead, HeadInit, LossConfig};
use crate::error::{Error, Result};
use crate::eval::{knn_classify, metrics, EvalSet};
use crate::optim::{lr_at, phase_at, AdamW, OptimConfig, Phase};
use crate::rng;
use crate::vit::BackboneParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub knn_acc: f64,
    pub knn_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTransition {
    pub epoch: usize,
    pub step: u64,
    pub from: Phase,
    pub to: Phase,
}

/// Training trace of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub transitions: Vec<PhaseTransition>,
    /// Set when the run stopped on a numeric failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// SHA-256 over everything except wall-clock timings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for s in &self.steps {
            h.update(s.step.to_le_bytes());
            h.update((s.epoch as u64).to_le_bytes());
            h.update(s.loss.to_bits().to_le_bytes());
            h.update(s.lr.to_bits().to_le_bytes());
            h.update(s.grad_norm.to_bits().to_le_bytes());
        }
        for e in &self.epochs {
            h.update((e.epoch as u64).to_le_bytes());
            h.update([e.phase as u8]);
            h.update(e.mean_loss.to_bits().to_le_bytes());
            if let Some(s) = &e.eval {
                h.update(s.knn_acc.to_bits().to_le_bytes());
                h.update(s.knn_macro_f1.to_bits().to_le_bytes());
            }
        }
        for t in &self.transitions {
            h.update((t.epoch as u64).to_le_bytes());
            h.update(t.step.to_le_bytes());
            h.update([t.from as u8, t.to as u8]);
        }
        if let Some(a) = &self.aborted {
            h.update(a.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn losses(&self) -> impl Iterator<Item = f32> + '_ {
        self.steps.iter().map(|s| s.loss)
    }
}

/// Which parameters train, per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePlan {
    /// Head only for the first epochs, then the last `unfreeze_last_k`
    /// blocks as well.
    Recipe,
    /// Everything trains from the first step.
    Full,
}

/// Per-epoch hook for optional evaluation snapshots.
pub struct Snapshots<'a> {
    pub every: usize,
    pub eval: &'a EvalSet,
}

pub struct TrainSpec<'a> {
    pub optim: &'a OptimConfig,
    pub loss: &'a LossConfig,
    pub augment: &'a AugmentConfig,
    pub plan: FreezePlan,
    pub seed: u64,
    pub snapshots: Option<Snapshots<'a>>,
}

/// DIET training of `backbone` on `subset` (datum indices are the targets).
/// Returns the trained head. On a numeric failure the partial log is kept in
/// `log` and the error is returned.
pub fn train_diet(backbone: &mut BackboneParams, subset: &[Sample], spec: &TrainSpec, log: &mut RunLog) -> Result<DietHead> {
    let d_classes = subset.len();
    if d_classes == 0 {
        return Err(Error::contract("training subset is empty"));
    }
    let cfg = spec.optim;
    let mut head = init_head(backbone.config().dim, d_classes, rng::derive_seed(spec.seed, "head", &[]), HeadInit::Normal)?;
    let steps_per_epoch = d_classes.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.total_epochs as u64;
    let mut opt = AdamW::new(cfg);
    let mut phase = match spec.plan {
        FreezePlan::Recipe => {
            backbone.set_trainable(0)?;
            Phase::HeadOnly
        }
        FreezePlan::Full => {
            backbone.set_all_trainable();
            Phase::PartialUnfreeze
        }
    };
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..d_classes).collect();
    for epoch in 0..cfg.total_epochs {
        let started = Instant::now();
        if spec.plan == FreezePlan::Recipe {
            let next = phase_at(epoch, cfg);
            if next != phase {
                backbone.set_trainable(cfg.unfreeze_last_k)?;
                log.transitions.push(PhaseTransition {
                    epoch,
                    step,
                    from: phase,
                    to: next,
                });
                phase = next;
            }
        }
        order.sort_unstable();
        order.shuffle(&mut rng::stream(spec.seed, "epoch-order", &[epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let views = chunk
                .iter()
                .map(|&i| {
                    let s = &subset[i];
                    let mut r = rng::stream(spec.seed, "augment", &[epoch as u64, s.datum_index as u64]);
                    augment(&s.pixels, spec.augment, &mut r)
                })
                .collect::<Vec<_>>();
            let batch = DietBatch {
                images: stack(&views)?,
                indices: chunk.iter().map(|&i| subset[i].datum_index).collect(),
            };
            let lr = lr_at(step, total_steps, cfg);
            let stats = match diet_step(backbone, &mut head, &batch, spec.loss, &mut opt, lr) {
                Ok(s) => s,
                Err(e @ Error::NumericAbort { .. }) => {
                    log.aborted = Some(e.to_string());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: stats.loss,
                lr,
                grad_norm: stats.grad_norm,
            });
            loss_sum += f64::from(stats.loss);
            batches += 1;
            step += 1;
        }
        let eval = match &spec.snapshots {
            Some(s) if s.every > 0 && (epoch + 1) % s.every == 0 => Some(snapshot(backbone, s.eval)?),
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            phase,
            mean_loss: loss_sum / batches as f64,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            eval,
        });
    }
    Ok(head)
}

fn snapshot(backbone: &BackboneParams, set: &EvalSet) -> Result<EvalSnapshot> {
    let train = crate::eval::extract_embeddings(backbone, &set.train, set.source, set.config.l2_normalize)?;
    let val = crate::eval::extract_embeddings(backbone, &set.val, set.source, set.config.l2_normalize)?;
    let knn = knn_classify(&train, &val, set.config.knn_k)?;
    let m = metrics(&knn.predictions, &val.labels, set.train.num_classes().max(set.val.num_classes()))?;
    Ok(EvalSnapshot {
        knn_acc: m.accuracy,
        knn_macro_f1: m.macro_f1,
    })
}
