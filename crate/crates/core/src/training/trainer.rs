use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::TileConfig;
use crate::layer::{model_backward, model_forward, ForwardOptions, ParamGrads, RoutingOverride, ToyModel};
use crate::numcore::{map_in_order, Rng};
use crate::router::sample_forced_global;
use crate::training::loss::compute_loss;
use crate::training::optim::{Optimizer, OptimizerConfig};
use crate::training::tasks::{make_batch, Sample, TaskSpec};

/// RNG stream tags. Each stochastic feature draws from its own stream so
/// toggling one never shifts another.
const DATA_STREAM: u64 = 0xDA7A;
const FORCE_STREAM: u64 = 0xF0CE;
const CONTROL_STREAM: u64 = 0xC0B7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    /// Probability of computing global attention for every token in a step.
    pub force_p: f64,
    pub collapse_mitigation: bool,
    /// Draw the forcing coin per layer instead of once per step.
    pub per_layer_force: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub threshold: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub tiles: TileConfig,
    /// Context-free control: ignore the router and send each token to global
    /// attention independently with this probability.
    pub bernoulli_control: Option<f64>,
    /// Worker threads for the per-sample passes. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.1,
            force_p: 0.1,
            collapse_mitigation: true,
            per_layer_force: false,
            lr: 3e-3,
            steps: 200,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            threshold: 0.5,
            grad_clip: Some(1.0),
            tiles: TileConfig::default(),
            bernoulli_control: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return fail(format!("lambda_reg must be finite and nonnegative, got {}", self.lambda_reg));
        }
        if !(0.0..=1.0).contains(&self.force_p) {
            return fail(format!("force_p must lie in [0, 1], got {}", self.force_p));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if self.threads == 0 {
            return fail("threads must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !self.threshold.is_finite() {
            return fail("threshold must be finite".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Some(p) = self.bernoulli_control {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("bernoulli_control must lie in [0, 1], got {p}"));
            }
        }
        self.optimizer.validate()?;
        self.tiles.validate()
    }

    /// Probability actually used for the forcing draw.
    pub fn effective_force_p(&self) -> f64 {
        if self.collapse_mitigation {
            self.force_p
        } else {
            0.0
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub ntp_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    /// Mean over the batch, per layer.
    pub sparsity: Vec<f64>,
    /// Whether any layer computed global attention for every token.
    pub forced_global: bool,
    pub forced_layers: Vec<bool>,
    pub grad_norm: f64,
}

/// Optimizer plus the step counter that keys every random draw.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: Optimizer,
    step: usize,
    rng: Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &ToyModel) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, model)?;
        let rng = Rng::new(config.seed);
        Ok(Self {
            config,
            optimizer,
            step: 0,
            rng,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Forcing flags for the current step.
    pub fn forced_flags(&self, num_layers: usize) -> Vec<bool> {
        let p = self.config.effective_force_p();
        let step = self.step as u64;
        if self.config.per_layer_force {
            (0..num_layers)
                .map(|l| sample_forced_global(&mut self.rng.derive(&[FORCE_STREAM, step, l as u64]), p))
                .collect()
        } else {
            let f = sample_forced_global(&mut self.rng.derive(&[FORCE_STREAM, step]), p);
            vec![f; num_layers]
        }
    }

    /// The batch the driver uses at the current step.
    pub fn batch(&self, task: &TaskSpec) -> Result<Vec<Sample>> {
        make_batch(task, self.config.batch_size, &self.rng.derive(&[DATA_STREAM, self.step as u64]))
    }

    /// Forward, loss, backward, and one optimizer update over `batch`.
    pub fn train_step(&mut self, model: &mut ToyModel, batch: &[Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let num_layers = model.num_layers();
        let forced = self.forced_flags(num_layers);
        let routing = match self.config.bernoulli_control {
            Some(p) => RoutingOverride::Bernoulli {
                p,
                seed: self.rng.derive(&[CONTROL_STREAM, self.step as u64]).next_u64(),
            },
            None => RoutingOverride::Learned,
        };
        let opts = ForwardOptions::train(forced.clone()).with_tiles(self.config.tiles);
        let inv = 1.0 / batch.len() as f64;
        let lambda = self.config.lambda_reg;
        let frozen: &ToyModel = model;
        let per_sample = map_in_order(batch, self.config.threads, |i, sample| -> Result<_> {
            let opts = opts.clone().with_routing(routing.for_sequence(i as u64));
            let f = model_forward(&sample.tokens, frozen, &opts)?;
            let loss = compute_loss(&f.logits, &sample.targets, &f.traces, lambda)?;
            let (g, _) = model_backward(frozen, &f.saved, &loss.d_logits, Some(&loss.d_dhat))?;
            let sparsity: Vec<f64> = f.traces.iter().map(|t| t.sparsity).collect();
            Ok((g, loss.parts, sparsity))
        });
        let mut grads = ParamGrads::zeros(model);
        let (mut ntp, mut reg) = (0.0, 0.0);
        let mut sparsity = vec![0.0; num_layers];
        for r in per_sample {
            let (g, parts, sp) = r?;
            grads.add_assign(&g)?;
            ntp += parts.ntp * inv;
            reg += parts.reg * inv;
            for (s, t) in sparsity.iter_mut().zip(sp) {
                *s += t * inv;
            }
        }
        grads.scale(inv as f32);
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() || !ntp.is_finite() || !reg.is_finite() {
            return Err(Error::Numeric(format!(
                "step {}: non-finite loss or gradient (ntp {ntp}, reg {reg}, |g| {grad_norm})",
                self.step
            )));
        }
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                grads.scale((clip / grad_norm) as f32);
            }
        }
        self.optimizer.step(model, &grads, self.config.lr)?;
        let report = StepReport {
            step: self.step,
            ntp_loss: ntp,
            reg_loss: reg,
            total_loss: ntp + reg,
            sparsity,
            forced_global: forced.iter().any(|&f| f),
            forced_layers: forced,
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Trains for `config.steps` steps on freshly drawn batches, calling
/// `on_step` after each one.
pub fn train(
    model: &mut ToyModel,
    task: &TaskSpec,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    task.validate()?;
    if task.vocab > model.config.vocab {
        return Err(Error::Config(format!(
            "task vocab {} exceeds model vocab {}",
            task.vocab, model.config.vocab
        )));
    }
    model.set_threshold(config.threshold);
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut reports = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = trainer.batch(task)?;
        let r = trainer.train_step(model, &batch)?;
        on_step(&r);
        reports.push(r);
    }
    Ok(reports)
}
