use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{ForwardOptions, ToyModel};
use crate::training::{evaluate, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f32,
    pub mean_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub global_macs: u64,
    pub key_tile_visits: u64,
    pub needle_accuracy: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// First-layer sparsity never decreases along the sweep. Its scores do
    /// not depend on the threshold, so this must hold exactly.
    pub first_layer_monotone: bool,
    /// Same check on the mean over layers. Later layers see inputs that
    /// change with earlier decisions, so this is reported only.
    pub mean_monotone: bool,
    /// Global MACs drop whenever mean sparsity strictly rises.
    pub macs_track_sparsity: bool,
}

fn non_decreasing(v: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = v.collect();
    v.windows(2).all(|w| w[1] >= w[0])
}

/// Evaluates `samples` once per threshold, overriding every layer's threshold.
pub fn threshold_sweep(model: &ToyModel, samples: &[Sample], thresholds: &[f32], opts: &ForwardOptions) -> Result<SweepReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold list is empty".into()));
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("thresholds must be strictly ascending".into()));
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let r = evaluate(model, samples, &opts.clone().with_threshold(Some(t)))?;
        points.push(SweepPoint {
            threshold: t,
            mean_sparsity: r.sparsity.iter().sum::<f64>() / r.sparsity.len() as f64,
            layer_sparsity: r.sparsity,
            global_macs: r.global_macs,
            key_tile_visits: r.key_tile_visits,
            needle_accuracy: r.needle_accuracy,
            token_accuracy: r.token_accuracy,
        });
    }
    let first_layer_monotone = non_decreasing(points.iter().map(|p| p.layer_sparsity[0]));
    let mean_monotone = non_decreasing(points.iter().map(|p| p.mean_sparsity));
    let macs_track_sparsity = points
        .windows(2)
        .all(|w| !(w[1].mean_sparsity > w[0].mean_sparsity) || w[1].global_macs < w[0].global_macs);
    Ok(SweepReport { points, first_layer_monotone, mean_monotone, macs_track_sparsity })
}
