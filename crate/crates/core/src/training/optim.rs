use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{ParamGrads, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerConfig::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0 (got {beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer state, laid out like the model it updates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Option<ToyModel>,
    v: Option<ToyModel>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &ToyModel) -> Result<Self> {
        config.validate()?;
        let (m, v) = match config {
            OptimizerConfig::Sgd => (None, None),
            OptimizerConfig::Adam { .. } => (Some(model.zeros_like()), Some(model.zeros_like())),
        };
        Ok(Self { config, m, v, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to the trainable tensors. `lr = 0` leaves the
    /// parameters bit-identical.
    pub fn step(&mut self, model: &mut ToyModel, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.t += 1;
        let trainable = model.config.trainable;
        let params = model.tensors_mut();
        let g = grads.grads.tensors();
        if params.len() != g.len() {
            return Err(Error::StateMismatch("gradient layout differs from model".into()));
        }
        match self.config {
            OptimizerConfig::Sgd => {
                for ((_, p, group), (_, g, _)) in params.into_iter().zip(g) {
                    if trainable.includes(group) && lr != 0.0 {
                        p.add_scaled(g, -lr as f32)?;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let (Some(ms), Some(vs)) = (self.m.as_mut(), self.v.as_mut()) else {
                    unreachable!("adam state is allocated in new")
                };
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let iter = params.into_iter().zip(g).zip(ms.tensors_mut()).zip(vs.tensors_mut());
                for ((((name, p, group), (_, g, _)), (_, m, _)), (_, v, _)) in iter {
                    if !trainable.includes(group) {
                        continue;
                    }
                    if p.shape() != g.shape() || p.shape() != m.shape() {
                        return Err(Error::StateMismatch(format!("{name}: optimizer state shape")));
                    }
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gd = gv as f64;
                        *mv = (beta1 * *mv as f64 + (1.0 - beta1) * gd) as f32;
                        *vv = (beta2 * *vv as f64 + (1.0 - beta2) * gd * gd) as f32;
                        if lr != 0.0 {
                            let mhat = *mv as f64 / bc1;
                            let vhat = *vv as f64 / bc2;
                            *pv -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
