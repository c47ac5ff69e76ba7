use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ledger::KvCacheLedger;
use crate::layer::{model_forward, ForwardOptions, ToyModel};
use crate::training::Sample;

/// Layers at or above this measured sparsity lose their global branch.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub sparsities: Vec<f64>,
    pub prune_threshold: f64,
    /// Layers pruned by this call. Layers that were already pruned are not
    /// listed.
    pub pruned_layer_ids: Vec<usize>,
    pub context: usize,
    pub before: KvCacheLedger,
    pub after: KvCacheLedger,
    /// `1 − after.global / before.global`; 0 when nothing was stored globally.
    pub kv_savings_fraction: f64,
}

/// Mean skipped fraction per layer over every token of `calib`, in eval mode.
/// Pruned layers report 1.
pub fn measure_layer_sparsity(model: &ToyModel, calib: &[Sample], opts: &ForwardOptions) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let opts = ForwardOptions { mode: crate::layer::Mode::Eval, ..opts.clone() };
    let mut skipped = vec![0usize; model.num_layers()];
    let mut tokens = 0usize;
    for s in calib {
        let f = model_forward(&s.tokens, model, &opts)?;
        tokens += s.tokens.len();
        for (acc, tr) in skipped.iter_mut().zip(&f.traces) {
            *acc += match &tr.routing {
                Some(r) => r.decisions.iter().filter(|&&d| !d).count(),
                None => s.tokens.len(),
            };
        }
    }
    Ok(skipped.into_iter().map(|k| k as f64 / tokens as f64).collect())
}

/// Prunes every layer whose sparsity is `>= prune_threshold` and accounts for
/// the KV storage at `context` tokens.
pub fn prune_layers(
    model: &ToyModel,
    sparsities: &[f64],
    prune_threshold: f64,
    context: usize,
) -> Result<(ToyModel, PruneReport)> {
    if sparsities.len() != model.num_layers() {
        return Err(Error::Config(format!(
            "{} sparsities for {} layers",
            sparsities.len(),
            model.num_layers()
        )));
    }
    if !prune_threshold.is_finite() {
        return Err(Error::Config("prune threshold must be finite".into()));
    }
    let before = KvCacheLedger::predicted(model, context);
    let mut pruned = model.clone();
    let mut ids = Vec::new();
    for (l, (block, &s)) in pruned.blocks.iter_mut().zip(sparsities).enumerate() {
        if !block.l2a.is_pruned() && s >= prune_threshold {
            block.l2a.prune();
            ids.push(l);
        }
    }
    let after = KvCacheLedger::predicted(&pruned, context);
    let kv_savings_fraction = if before.total_global_entries == 0 {
        0.0
    } else {
        1.0 - after.total_global_entries as f64 / before.total_global_entries as f64
    };
    let report = PruneReport {
        sparsities: sparsities.to_vec(),
        prune_threshold,
        pruned_layer_ids: ids,
        context,
        before,
        after,
        kv_savings_fraction,
    };
    Ok((pruned, report))
}
