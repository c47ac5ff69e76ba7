//! End-to-end drivers for the experiments the CLI and examples run: dense
//! base pretraining, conversion to routed layers, the router-collapse
//! comparison, the context-free routing control, and post-training pruning.
//!
//! Converting a trained dense model mirrors how conditional attention is
//! normally introduced: the global branch starts as a copy of a working
//! attention layer, so the router has something useful to keep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{measure_layer_sparsity, prune_layers, KvCacheLedger, PruneReport};
use crate::layer::{ForwardOptions, ModelConfig, RoutingOverride, ToyModel, TrainableSet};
use crate::numcore::Rng;
use crate::training::{evaluate, make_batch, train, EvalReport, Sample, StepReport, TaskSpec, TrainConfig};

/// Stream tags for model initialization and held-out data.
const INIT_STREAM: u64 = 0x1417;
const EVAL_STREAM: u64 = 0xE7A1;
const CALIB_STREAM: u64 = 0xCA1B;

/// Dense pretraining before conversion. `steps = 0` skips it and starts the
/// routed model from random weights.
///
/// With `warmup_steps > 0` the base first trains on the same task at the
/// shorter length `warmup_n`. Lookups that need two composed heads are found
/// far sooner on short sequences, where attention is not yet spread over
/// hundreds of positions, and they carry over to the full length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub warmup_n: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 6e-3,
            batch_size: 16,
            seed: 1000,
            warmup_steps: 0,
            warmup_n: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 64, seed: 999 }
    }
}

impl EvalConfig {
    pub fn samples(&self, task: &TaskSpec) -> Result<Vec<Sample>> {
        if self.samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        make_batch(task, self.samples, &Rng::new(self.seed).split(EVAL_STREAM))
    }

    /// A second held-out set drawn from a separate stream, for calibration.
    pub fn calibration(&self, task: &TaskSpec, count: usize) -> Result<Vec<Sample>> {
        if count == 0 {
            return Err(Error::Config("calibration set must be nonempty".into()));
        }
        make_batch(task, count, &Rng::new(self.seed).split(CALIB_STREAM))
    }
}

/// Builds the initial routed model: a converted dense base when
/// `base.steps > 0`, otherwise a fresh zero-router model.
pub fn initial_model(model: &ModelConfig, task: &TaskSpec, base: &BaseConfig, seed: u64) -> Result<(ToyModel, Vec<StepReport>)> {
    model.validate()?;
    let mut rng = Rng::new(seed).split(INIT_STREAM);
    if base.steps == 0 {
        return Ok((ToyModel::new(model.clone(), &mut rng)?, Vec::new()));
    }
    let dense = pretrain_dense_base(model, task, base, &mut rng)?;
    let mut converted = ToyModel::from_dense_base(&dense.0, model.window)?;
    converted.config.trainable = model.trainable;
    Ok((converted, dense.1))
}

/// Trains a standard dense transformer of the same shape with full causal
/// attention in every layer. Pretraining updates every parameter;
/// `model.trainable` only restricts the routed fine-tuning that follows.
pub fn pretrain_dense_base(
    model: &ModelConfig,
    task: &TaskSpec,
    base: &BaseConfig,
    rng: &mut Rng,
) -> Result<(ToyModel, Vec<StepReport>)> {
    let cfg = ModelConfig { trainable: TrainableSet::All, ..model.clone() };
    let mut dense = ToyModel::dense_base(cfg, rng)?;
    let stage = |steps: usize, seed: u64| TrainConfig {
        lambda_reg: 0.0,
        collapse_mitigation: false,
        lr: base.lr,
        steps,
        batch_size: base.batch_size,
        seed,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    if base.warmup_steps > 0 {
        let short = TaskSpec { n: base.warmup_n, ..task.clone() };
        short.validate()?;
        log = train(&mut dense, &short, &stage(base.warmup_steps, base.seed ^ 0x5707), |r| {
            if r.step % 100 == 0 {
                log::debug!("base warmup step {} ntp {:.4}", r.step, r.ntp_loss);
            }
        })?;
    }
    let offset = log.len();
    let main = train(&mut dense, task, &stage(base.steps, base.seed), |r| {
        if r.step % 100 == 0 {
            log::debug!("base step {} ntp {:.4}", offset + r.step, r.ntp_loss);
        }
    })?;
    log.extend(main.into_iter().map(|mut r| {
        r.step += offset;
        r
    }));
    Ok((dense, log))
}

/// Outcome of one training run plus its held-out evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_step: Option<StepReport>,
    /// First step whose batch skipped global attention in every layer.
    pub first_fully_sparse_step: Option<usize>,
    pub eval: EvalReport,
}

impl RunSummary {
    /// Every layer skipped every held-out token.
    pub fn collapsed(&self) -> bool {
        self.eval.sparsity.iter().all(|&s| s == 1.0)
    }

    pub fn mean_sparsity(&self) -> f64 {
        self.eval.sparsity.iter().sum::<f64>() / self.eval.sparsity.len().max(1) as f64
    }
}

fn summarize(log: &[StepReport], eval: EvalReport) -> RunSummary {
    RunSummary {
        final_step: log.last().cloned(),
        first_fully_sparse_step: log.iter().find(|r| r.sparsity.iter().all(|&s| s == 1.0)).map(|r| r.step),
        eval,
    }
}

/// Trains a copy of `start` and evaluates it on `evals`. A Bernoulli
/// control is evaluated with the same context-free routing it was trained
/// with.
pub fn train_and_evaluate(
    start: &ToyModel,
    task: &TaskSpec,
    cfg: &TrainConfig,
    evals: &[Sample],
    mut on_step: impl FnMut(&StepReport),
) -> Result<(ToyModel, Vec<StepReport>, RunSummary)> {
    let mut model = start.clone();
    let log = train(&mut model, task, cfg, &mut on_step)?;
    let opts = match cfg.bernoulli_control {
        Some(p) => ForwardOptions::eval().with_routing(RoutingOverride::Bernoulli { p, seed: cfg.seed ^ EVAL_STREAM }),
        None => ForwardOptions::eval(),
    }
    .with_tiles(cfg.tiles);
    let eval = evaluate(&model, evals, &opts)?;
    let summary = summarize(&log, eval);
    Ok((model, log, summary))
}

/// Accuracy with every global branch removed: what local attention alone
/// can reach.
pub fn local_only_ceiling(model: &ToyModel, evals: &[Sample]) -> Result<EvalReport> {
    let mut local = model.clone();
    local.blocks.iter_mut().for_each(|b| b.l2a.prune());
    evaluate(&local, evals, &ForwardOptions::eval())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub lambda_reg: f64,
    pub force_p: f64,
    pub mitigation_off: RunSummary,
    pub mitigation_on: RunSummary,
    pub local_only_accuracy: f64,
    /// Needle accuracy of the mitigated run above the local-only ceiling.
    pub margin: f64,
}

/// Trains the same start twice at the same `λ` and seed, once without and
/// once with forced global steps.
pub fn collapse_experiment(start: &ToyModel, task: &TaskSpec, cfg: &TrainConfig, evals: &[Sample]) -> Result<CollapseReport> {
    let off = TrainConfig { collapse_mitigation: false, ..cfg.clone() };
    let on = TrainConfig { collapse_mitigation: true, ..cfg.clone() };
    let (_, _, mitigation_off) = train_and_evaluate(start, task, &off, evals, |_| {})?;
    let (_, _, mitigation_on) = train_and_evaluate(start, task, &on, evals, |_| {})?;
    let ceiling = local_only_ceiling(start, evals)?.needle_accuracy;
    Ok(CollapseReport {
        lambda_reg: cfg.lambda_reg,
        force_p: cfg.force_p,
        margin: mitigation_on.eval.needle_accuracy - ceiling,
        mitigation_off,
        mitigation_on,
        local_only_accuracy: ceiling,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRun {
    pub seed: u64,
    pub learned: RunSummary,
    /// Keep probability of the control, `1 −` the learned mean sparsity.
    pub control_keep_p: f64,
    pub control: RunSummary,
    pub sparsity_gap: f64,
    pub accuracy_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub runs: Vec<ControlRun>,
    pub min_accuracy_gap: f64,
    pub max_sparsity_gap: f64,
}

/// For each seed: train with the learned router, then train a control from
/// the same start whose tokens route independently at the learned model's
/// mean keep rate.
pub fn routing_control_experiment(
    start: &ToyModel,
    task: &TaskSpec,
    cfg: &TrainConfig,
    evals: &[Sample],
    seeds: &[u64],
) -> Result<ControlReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let learned_cfg = TrainConfig { seed, bernoulli_control: None, ..cfg.clone() };
        let (_, _, learned) = train_and_evaluate(start, task, &learned_cfg, evals, |_| {})?;
        let keep = (1.0 - learned.mean_sparsity()).clamp(0.0, 1.0);
        let control_cfg = TrainConfig { seed, bernoulli_control: Some(keep), ..cfg.clone() };
        let (_, _, control) = train_and_evaluate(start, task, &control_cfg, evals, |_| {})?;
        runs.push(ControlRun {
            seed,
            sparsity_gap: (learned.mean_sparsity() - control.mean_sparsity()).abs(),
            accuracy_gap: learned.eval.needle_accuracy - control.eval.needle_accuracy,
            learned,
            control_keep_p: keep,
            control,
        });
    }
    Ok(ControlReport {
        min_accuracy_gap: runs.iter().map(|r| r.accuracy_gap).fold(f64::INFINITY, f64::min),
        max_sparsity_gap: runs.iter().map(|r| r.sparsity_gap).fold(0.0, f64::max),
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneExperiment {
    pub report: PruneReport,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub accuracy_delta: f64,
    /// Savings implied by the closed-form ledger of the pruned model.
    pub predicted_savings: f64,
    /// Stored entries counted after prefilling one `context`-token sequence
    /// into the pruned model equal the closed form.
    pub ledger_counted_matches: bool,
}

/// Measures sparsity on `calib`, prunes, and re-evaluates on `evals`.
pub fn pruning_experiment(
    model: &ToyModel,
    calib: &[Sample],
    evals: &[Sample],
    prune_threshold: f64,
) -> Result<(ToyModel, PruneExperiment)> {
    let context = evals.first().map(|s| s.tokens.len()).ok_or_else(|| Error::Config("no evaluation samples".into()))?;
    let sparsities = measure_layer_sparsity(model, calib, &ForwardOptions::eval())?;
    let (pruned, report) = prune_layers(model, &sparsities, prune_threshold, context)?;
    let before = evaluate(model, evals, &ForwardOptions::eval())?;
    let after = evaluate(&pruned, evals, &ForwardOptions::eval())?;
    let routed_before = model.layers().filter(|l| !l.is_pruned()).count();
    let routed_after = pruned.layers().filter(|l| !l.is_pruned()).count();
    let predicted_savings = if routed_before == 0 {
        0.0
    } else {
        1.0 - routed_after as f64 / routed_before as f64
    };
    let p = crate::inference::prefill(&pruned, &evals[0].tokens, None, Default::default())?;
    let ledger_counted_matches = KvCacheLedger::from_cache(&pruned, &p.cache) == KvCacheLedger::predicted(&pruned, context);
    let exp = PruneExperiment {
        accuracy_before: before.needle_accuracy,
        accuracy_after: after.needle_accuracy,
        accuracy_delta: after.needle_accuracy - before.needle_accuracy,
        predicted_savings,
        ledger_counted_matches,
        report,
    };
    Ok((pruned, exp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TaskKind;

    fn small() -> (ModelConfig, TaskSpec) {
        let model = ModelConfig { vocab: 16, d_model: 8, num_heads: 2, ffn_hidden: 8, window: 2, ..ModelConfig::default() };
        let task = TaskSpec { kind: TaskKind::Needle, n: 24, vocab: 16, window: 2, depth: 2, num_values: 3, num_queries: 2 };
        (model, task)
    }

    #[test]
    fn conversion_and_drivers_run() {
        let (mcfg, task) = small();
        let base = BaseConfig { steps: 2, batch_size: 2, ..BaseConfig::default() };
        let (start, log) = initial_model(&mcfg, &task, &base, 0).unwrap();
        assert_eq!(log.len(), 2);
        assert!(start.blocks.iter().all(|b| !b.l2a.is_pruned() && b.l2a.window == 2));
        let evals = EvalConfig { samples: 3, seed: 1 }.samples(&task).unwrap();
        let cfg = TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::default() };
        let r = collapse_experiment(&start, &task, &cfg, &evals).unwrap();
        assert_eq!(r.mitigation_on.final_step.as_ref().unwrap().step, 1);
        let c = routing_control_experiment(&start, &task, &cfg, &evals, &[0]).unwrap();
        assert_eq!(c.runs.len(), 1);
        let calib = EvalConfig { samples: 3, seed: 1 }.calibration(&task, 2).unwrap();
        let (_, p) = pruning_experiment(&start, &calib, &evals, 0.95).unwrap();
        assert!(p.ledger_counted_matches);
        assert_eq!(p.report.kv_savings_fraction, p.predicted_savings);
    }

    #[test]
    fn zero_base_steps_gives_fresh_model() {
        let (mcfg, task) = small();
        let (m, log) = initial_model(&mcfg, &task, &BaseConfig { steps: 0, ..BaseConfig::default() }, 3).unwrap();
        assert!(log.is_empty());
        assert!(m.blocks.iter().all(|b| b.l2a.router.w.data().iter().all(|&x| x == 0.0)));
    }
}
