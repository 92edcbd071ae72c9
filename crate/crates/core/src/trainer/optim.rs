use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCfg {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub total_steps: usize,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg::adam(1e-3)
    }
}

impl OptimizerCfg {
    /// Adam with cosine annealing; `total_steps` is filled in by the trainer.
    pub fn adam(lr: f64) -> Self {
        OptimizerCfg {
            kind: OptimizerKind::Adam,
            lr,
            lr_min: 0.0,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            total_steps: 0,
        }
    }

    /// Plain SGD at a constant rate.
    pub fn sgd(lr: f64) -> Self {
        OptimizerCfg {
            kind: OptimizerKind::Sgd,
            schedule: Schedule::Constant,
            ..Self::adam(lr)
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule, total_steps: usize) -> Self {
        self.schedule = schedule;
        self.total_steps = total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!("lr_min {} must lie in [0, lr]", self.lr_min)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for update number `step` (0-based).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.lr),
            Schedule::Cosine => cosine_lr(step, self),
        }
    }
}

/// `lr_min + (lr - lr_min) * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, cfg: &OptimizerCfg) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::value(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if cfg.total_steps == 0 {
        return Ok(cfg.lr);
    }
    let frac = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + (cfg.lr - cfg.lr_min) * (1.0 + (PI * frac).cos()) / 2.0)
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD or Adam state over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerCfg,
    step: usize,
    slots: HashMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerCfg) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step: 0,
            slots: HashMap::new(),
        })
    }

    pub fn cfg(&self) -> &OptimizerCfg {
        &self.cfg
    }

    /// Updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> Result<f64> {
        self.cfg.lr_at(self.step)
    }

    /// One update of every trainable parameter. Parameters without a
    /// gradient are treated as having a zero gradient; frozen parameters are
    /// never written.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for id in grads.params.keys() {
            if !params.is_trainable(id) {
                return Err(Error::state(format!("gradient for frozen or unknown parameter {id}")));
            }
        }
        let lr = self.cfg.lr_at(self.step)?;
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<ParamId> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            let w = params.tensor_mut(&id)?;
            let n = w.numel();
            let g: Vec<f64> = match grads.get(&id) {
                Some(g) if g.shape() != w.shape() => {
                    return Err(Error::state(format!(
                        "gradient for {id} has shape {:?}, parameter {:?}",
                        g.shape(),
                        w.shape()
                    )))
                }
                Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; n],
            };
            let slot = self.slots.entry(id).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = w.data_mut();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let mu = self.cfg.momentum;
                    for i in 0..n {
                        let d = if mu > 0.0 {
                            slot.m[i] = mu * slot.m[i] + g[i];
                            slot.m[i]
                        } else {
                            g[i]
                        };
                        data[i] = T::from_f64(data[i].as_f64() - lr * d);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for i in 0..n {
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = slot.m[i] / c1;
                        let vhat = slot.v[i] / c2;
                        data[i] = T::from_f64(data[i].as_f64() - lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}
