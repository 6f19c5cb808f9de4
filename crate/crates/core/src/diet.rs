//! Datum-index classification: the linear head over sample indices, the
//! label-smoothed cross-entropy, and one optimization step of the pair.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::vit::{BackboneOutput, BackboneParams, Param};

/// Which backbone output feeds the head (and the evaluation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationSource {
    #[default]
    Cls,
    MeanPatch,
}

impl RepresentationSource {
    pub fn select(self, out: &BackboneOutput) -> Var {
        match self {
            RepresentationSource::Cls => out.cls,
            RepresentationSource::MeanPatch => out.mean_patch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub smoothing: f64,
    pub representation_source: RepresentationSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.3,
            representation_source: RepresentationSource::Cls,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "LossConfig.smoothing = {} must lie in [0, 1)",
                self.smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Normal,
    Zeros,
}

/// Bias-free `[D, d]` map from representations to datum-index logits.
#[derive(Clone, Debug)]
pub struct DietHead {
    pub weight: Param,
}

impl DietHead {
    pub fn classes(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

/// Head rows drawn from normal(0, 0.02), or all zeros.
pub fn init_head(width: usize, classes: usize, seed: u64, init: HeadInit) -> Result<DietHead> {
    if width == 0 || classes == 0 {
        return Err(Error::contract("head needs at least one class and one feature"));
    }
    let value = match init {
        HeadInit::Zeros => Tensor::zeros(vec![classes, width]),
        HeadInit::Normal => {
            let mut r = rng::stream(seed, "head-init", &[]);
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            Tensor::from_fn(vec![classes, width], |_| normal.sample(&mut r) as f32)
        }
    };
    Ok(DietHead {
        weight: Param {
            name: "head.weight".into(),
            value,
            trainable: true,
            decay: true,
        },
    })
}

/// Smoothed target distribution `q = (1 − ε)·onehot(n) + ε/D` per row.
pub fn smoothed_targets<T: Scalar>(targets: &[usize], classes: usize, epsilon: f64) -> Result<Tensor<T>> {
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::contract(format!(
            "target index {bad} out of range for {classes} classes"
        )));
    }
    if targets.is_empty() {
        return Err(Error::contract("empty target list"));
    }
    let off = T::lit(epsilon / classes as f64);
    let on = T::lit(1.0 - epsilon + epsilon / classes as f64);
    let mut q = vec![off; targets.len() * classes];
    for (row, &t) in targets.iter().enumerate() {
        q[row * classes + t] = on;
    }
    Tensor::new(vec![targets.len(), classes], q)
}

/// Batch mean of `−Σ_c q_c · log_softmax(logits)_c`.
pub fn smoothed_xent<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::contract(format!("smoothing {epsilon} outside [0, 1)")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::dim(format!(
            "logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let q = g.constant(smoothed_targets(targets, shape[1], epsilon)?);
    let logp = g.log_softmax(logits)?;
    let weighted = g.mul(logp, q)?;
    let total = g.sum(weighted)?;
    g.scale(total, T::lit(-1.0 / targets.len() as f64))
}

/// Augmented pixels with their datum indices. Deliberately carries no class
/// labels.
#[derive(Clone, Debug)]
pub struct DietBatch {
    /// `[B, C, S, S]`
    pub images: Tensor<f32>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f32,
    /// Global L2 norm of all trainable gradients, before the update.
    pub grad_norm: f32,
}

/// Forward, loss, backward, and one AdamW update of the trainable
/// parameters of `backbone` and `head`.
pub fn diet_step(
    backbone: &mut BackboneParams,
    head: &mut DietHead,
    batch: &DietBatch,
    cfg: &LossConfig,
    opt: &mut AdamW,
    lr: f64,
) -> Result<StepStats> {
    if batch.indices.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if batch.images.shape().first() != Some(&batch.indices.len()) {
        return Err(Error::dim(format!(
            "{} indices for images of shape {:?}",
            batch.indices.len(),
            batch.images.shape()
        )));
    }
    let step = opt.steps();
    let mut g = Graph::with_capacity(256);
    let vars = backbone.bind(&mut g);
    let w = head.weight.bind(&mut g);
    let out = backbone.forward(&mut g, &vars, &batch.images)?;
    let rep = cfg.representation_source.select(&out);
    let logits = g.matmul_nt(rep, w)?;
    let loss_var = smoothed_xent(&mut g, logits, &batch.indices, cfg.smoothing)?;
    let loss = g.value(loss_var).item()?;
    if !loss.is_finite() {
        return Err(Error::NumericAbort {
            step,
            message: format!("loss is {loss}"),
        });
    }
    g.backward(loss_var)?;

    let mut sq = 0.0f64;
    for &v in vars.iter().chain(std::iter::once(&w)) {
        if let Some(grad) = g.grad(v) {
            sq += grad.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
        }
    }
    let grad_norm = sq.sqrt() as f32;
    if !grad_norm.is_finite() {
        return Err(Error::NumericAbort {
            step,
            message: "non-finite gradient".into(),
        });
    }

    let updates = backbone
        .params_mut()
        .iter_mut()
        .zip(vars.iter().map(|&v| g.grad(v)))
        .chain(std::iter::once((&mut head.weight, g.grad(w))));
    opt.step(updates, lr)?;
    Ok(StepStats { loss, grad_norm })
}
