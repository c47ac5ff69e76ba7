use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{model_forward, ForwardOptions, ToyModel};
use crate::training::loss::compute_loss;
use crate::training::tasks::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    /// Argmax accuracy on positions that need long-range context.
    pub needle_accuracy: f64,
    /// Argmax accuracy on every labelled position.
    pub token_accuracy: f64,
    pub mean_ntp: f64,
    /// Mean fraction of skipped tokens per layer.
    pub sparsity: Vec<f64>,
    /// Multiply-accumulates spent in the global kernel, summed over layers
    /// and sequences.
    pub global_macs: u64,
    pub key_tile_visits: u64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode forward over `samples` (forcing is never applied). A Bernoulli
/// routing override draws a fresh mask per sample.
pub fn evaluate(model: &ToyModel, samples: &[Sample], opts: &ForwardOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let opts = ForwardOptions {
        mode: crate::layer::Mode::Eval,
        ..opts.clone()
    };
    let layers = model.num_layers();
    let mut sparsity = vec![0.0; layers];
    let (mut needle_hit, mut needle_total, mut tok_hit, mut tok_total) = (0usize, 0usize, 0usize, 0usize);
    let mut ntp = 0.0;
    let (mut macs, mut visits) = (0u64, 0u64);
    for (i, s) in samples.iter().enumerate() {
        let opts = opts.clone().with_routing(opts.routing.for_sequence(i as u64));
        let f = model_forward(&s.tokens, model, &opts)?;
        ntp += compute_loss(&f.logits, &s.targets, &f.traces, 0.0)?.parts.ntp;
        for (t, target) in s.targets.iter().enumerate() {
            if let Some(y) = *target {
                tok_total += 1;
                tok_hit += usize::from(argmax(f.logits.row(t)) == y);
            }
        }
        for &t in &s.needle_positions {
            if let Some(y) = s.targets[t] {
                needle_total += 1;
                needle_hit += usize::from(argmax(f.logits.row(t)) == y);
            }
        }
        for (acc, tr) in sparsity.iter_mut().zip(&f.traces) {
            *acc += tr.sparsity;
            macs += tr.kernel.macs;
            visits += tr.kernel.key_tile_visits;
        }
    }
    let count = samples.len() as f64;
    let ratio = |hit: usize, total: usize| if total == 0 { 0.0 } else { hit as f64 / total as f64 };
    Ok(EvalReport {
        sequences: samples.len(),
        needle_accuracy: ratio(needle_hit, needle_total),
        token_accuracy: ratio(tok_hit, tok_total),
        mean_ntp: ntp / count,
        sparsity: sparsity.into_iter().map(|s| s / count).collect(),
        global_macs: macs,
        key_tile_visits: visits,
    })
}
