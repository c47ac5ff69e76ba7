//! Operation-count benchmark of the global kernel over a grid of context
//! lengths and routing sparsities.
//!
//! Work is measured with the kernel's own counters, so results are exact and
//! reproducible. Wall time is optional and only informational.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{compact_queries, predicted_key_tile_visits, predicted_row_tile_visits, sparse_attention_forward, TileConfig};
use crate::numcore::{Matrix, Rng};

pub const CSV_HEADER: &str = "n,sparsity,key_tile_visits,macs,wall_ms,dense_macs,reduction_ratio";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub head_dim: usize,
    pub tiles: TileConfig,
    pub seed: u64,
    /// Record wall-clock time. Off by default so reports stay byte-stable.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 1024, 4096],
            sparsities: vec![0.0, 0.5, 0.9, 0.95, 1.0],
            head_dim: 16,
            tiles: TileConfig::default(),
            seed: 0,
            timing: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Config("bench lengths must be nonempty and positive".into()));
        }
        if self.sparsities.is_empty() || self.sparsities.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("bench sparsities must lie in [0, 1]".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        self.tiles.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    /// Requested sparsity; the mask skips exactly `round(sparsity · n)` queries.
    pub sparsity: f64,
    pub key_tile_visits: u64,
    pub macs: u64,
    pub wall_ms: Option<f64>,
    pub dense_macs: u64,
    /// Per-row key tiles touched, sparse over dense.
    pub reduction_ratio: f64,
    /// `Σ_active ⌈(pos+1)/b_k⌉ / Σ_all ⌈(pos+1)/b_k⌉`.
    pub predicted_ratio: f64,
    pub predicted_key_tile_visits: u64,
}

impl BenchRow {
    /// Counters agree exactly with the closed forms.
    pub fn matches_model(&self) -> bool {
        self.reduction_ratio == self.predicted_ratio && self.key_tile_visits == self.predicted_key_tile_visits
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub all_match_model: bool,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let wall = r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.n, r.sparsity, r.key_tile_visits, r.macs, wall, r.dense_macs, r.reduction_ratio
            );
        }
        out
    }
}

/// Mask over `n` positions with exactly `round(sparsity · n)` skipped.
pub fn mask_with_sparsity(n: usize, sparsity: f64, rng: &mut Rng) -> Vec<bool> {
    let skipped = ((sparsity * n as f64).round() as usize).min(n);
    let mut mask: Vec<bool> = (0..n).map(|i| i >= skipped).collect();
    rng.shuffle(&mut mask);
    mask
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut rows = Vec::new();
    for (i, &n) in cfg.lengths.iter().enumerate() {
        let mut rng = root.derive(&[i as u64]);
        let q = Matrix::random_normal(n, cfg.head_dim, 1.0, &mut rng);
        let k = Matrix::random_normal(n, cfg.head_dim, 1.0, &mut rng);
        let v = Matrix::random_normal(n, cfg.head_dim, 1.0, &mut rng);
        let dense_cq = compact_queries(&q, &vec![true; n])?;
        let dense = sparse_attention_forward(&dense_cq, &k, &v, cfg.tiles)?;
        for (j, &s) in cfg.sparsities.iter().enumerate() {
            let mask = mask_with_sparsity(n, s, &mut root.derive(&[i as u64, j as u64]));
            let cq = compact_queries(&q, &mask)?;
            let start = Instant::now();
            let fwd = sparse_attention_forward(&cq, &k, &v, cfg.tiles)?;
            let wall_ms = cfg.timing.then(|| start.elapsed().as_secs_f64() * 1e3);
            rows.push(BenchRow {
                n,
                sparsity: s,
                key_tile_visits: fwd.stats.key_tile_visits,
                macs: fwd.stats.macs,
                wall_ms,
                dense_macs: dense.stats.macs,
                reduction_ratio: ratio(fwd.stats.row_tile_visits, dense.stats.row_tile_visits),
                predicted_ratio: ratio(
                    predicted_row_tile_visits(&cq.q_idx, cfg.tiles),
                    predicted_row_tile_visits(&dense_cq.q_idx, cfg.tiles),
                ),
                predicted_key_tile_visits: predicted_key_tile_visits(&cq.q_idx, cfg.tiles),
            });
        }
    }
    let all_match_model = rows.iter().all(BenchRow::matches_model);
    Ok(BenchReport { rows, all_match_model })
}
