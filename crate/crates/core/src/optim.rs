//! AdamW, the warmup + cosine learning-rate schedule, and the two-phase
//! freeze schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    pub warmup_frac: f64,
    pub head_only_frac: f64,
    pub batch_size: usize,
    pub unfreeze_last_k: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            total_epochs: 150,
            warmup_frac: 0.10,
            head_only_frac: 0.05,
            batch_size: 32,
            unfreeze_last_k: 2,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_max", self.lr_max),
            ("eps", self.eps),
            ("weight_decay", self.weight_decay),
            ("head_only_frac", self.head_only_frac),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("OptimConfig.{name} = {v} must be >= 0")));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "OptimConfig.warmup_frac = {} must lie in [0, 1)",
                self.warmup_frac
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("OptimConfig.betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("OptimConfig.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        let w = (self.warmup_frac * total_steps as f64).round() as u64;
        w.min(total_steps.saturating_sub(1))
    }

    /// Epochs during which only the head trains: `max(1, floor(frac * E))`.
    pub fn head_only_epochs(&self) -> usize {
        ((self.head_only_frac * self.total_epochs as f64).floor() as usize).max(1)
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine annealing to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &OptimConfig) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    let warmup = cfg.warmup_steps(total);
    if step < warmup {
        return cfg.lr_max * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (cfg.lr_max * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    HeadOnly,
    PartialUnfreeze,
}

pub fn phase_at(epoch: usize, cfg: &OptimConfig) -> Phase {
    if epoch < cfg.head_only_epochs() {
        Phase::HeadOnly
    } else {
        Phase::PartialUnfreeze
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    /// Updates this parameter has received; drives bias correction.
    steps: u64,
}

/// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter name
/// and only created the first time a parameter is updated.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self::with_hyper(cfg.betas, cfg.eps, cfg.weight_decay)
    }

    pub fn with_hyper(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.state.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// One update of every trainable parameter that has a gradient.
    ///
    /// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p`, with decay only where
    /// `param.decay` is set. Fails without modifying anything if an update
    /// would be non-finite.
    pub fn step<'a>(
        &mut self,
        updates: impl IntoIterator<Item = (&'a mut Param, Option<&'a [f32]>)>,
        lr: f64,
    ) -> Result<()> {
        let updates: Vec<(&mut Param, &[f32])> = updates
            .into_iter()
            .filter(|(p, _)| p.trainable)
            .filter_map(|(p, g)| g.map(|g| (p, g)))
            .collect();
        let next = self.step + 1;
        let mut staged: Vec<(usize, Vec<f32>, Moments)> = Vec::with_capacity(updates.len());
        for (i, (param, grad)) in updates.iter().enumerate() {
            if grad.len() != param.value.len() {
                return Err(Error::contract(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    param.name,
                    grad.len(),
                    param.value.len()
                )));
            }
            let mut mom = self.state.get(&param.name).cloned().unwrap_or_else(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                steps: 0,
            });
            mom.steps += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let bc1 = 1.0 - b1.powi(mom.steps as i32);
            let bc2 = 1.0 - b2.powi(mom.steps as i32);
            let wd = if param.decay { self.weight_decay } else { 0.0 };
            let mut out = Vec::with_capacity(grad.len());
            for (k, (&p, &g)) in param.value.data().iter().zip(grad.iter()).enumerate() {
                let g = f64::from(g);
                let m = b1 * f64::from(mom.m[k]) + (1.0 - b1) * g;
                let v = b2 * f64::from(mom.v[k]) + (1.0 - b2) * g * g;
                mom.m[k] = m as f32;
                mom.v[k] = v as f32;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let p = f64::from(p);
                let new = p - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * wd * p;
                if !new.is_finite() {
                    return Err(Error::NumericAbort {
                        step: next,
                        message: format!("non-finite AdamW update for {}", param.name),
                    });
                }
                out.push(new as f32);
            }
            staged.push((i, out, mom));
        }
        let mut updates = updates;
        for (i, values, mom) in staged {
            let param = &mut updates[i].0;
            if lr != 0.0 {
                param.value.data_mut().copy_from_slice(&values);
            }
            self.state.insert(param.name.clone(), mom);
        }
        self.step = next;
        Ok(())
    }
}
