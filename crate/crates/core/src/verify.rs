//! Self-check suite: every property the library promises, run against
//! reference implementations and finite differences.
//!
//! Each check returns a [`CheckResult`] with the worst observed error so a
//! failing run says which property broke and by how much.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attn_ref::{dense_causal_attention, multi_head_attention, sliding_window_attention, AttnParams, CausalMaskSpec};
use crate::bench::{run_bench, BenchConfig};
use crate::error::Result;
use crate::inference::{decode_step, prefill, prefill_then_decode, threshold_sweep, KvCacheLedger};
use crate::kernel::{
    compact_queries, predicted_key_tile_visits, scatter_outputs, sparse_attention_backward, sparse_attention_forward,
    SparseSaved, TileConfig,
};
use crate::layer::{model_backward, model_forward, ForwardOptions, ModelConfig, RoutingOverride, ToyModel, TrainableSet};
use crate::numcore::{apply_rope, finite_diff_grad, positions, relative_error, row_softmax, Matrix, RopeConfig, Rng};
use crate::router::{route, router_backward_ste, RouterParams};
use crate::training::{
    compute_loss, make_batch, make_synthetic_task, verify_router_gradient_identity, IdentityCheck, TaskKind, TaskSpec,
    TrainConfig, Trainer,
};

/// Deliberate corruption used to prove the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// The kernel sees the routing mask with its first bit flipped while the
    /// oracle sees the original.
    FlipMaskBit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Extra tile shape added to the kernel matrix and used by model checks.
    pub tiles: Option<TileConfig>,
    pub fault: Option<Fault>,
    /// Run only checks whose name contains one of these substrings.
    pub only: Vec<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tiles: None,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest error observed, in the check's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
    /// Wall time; excluded from reports that must be byte-stable.
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<34} {:>6} {:>8} {:>12} {:>10}\n", "check", "status", "cases", "worst", "tol");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<34} {:>6} {:>8} {:>12.3e} {:>10.1e}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.cases,
                c.worst,
                c.tolerance
            ));
            if !c.passed && !c.detail.is_empty() {
                out.push_str(&format!("    {}\n", c.detail));
            }
        }
        out
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Running worst-case tracker for one check.
struct Tally {
    cases: usize,
    worst: f64,
    tol: f64,
    first_failure: Option<String>,
}

impl Tally {
    fn new(tol: f64) -> Self {
        Self { cases: 0, worst: 0.0, tol, first_failure: None }
    }

    fn err(&mut self, value: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        let v = if value.is_nan() { f64::INFINITY } else { value };
        self.worst = self.worst.max(v);
        if v > self.tol && self.first_failure.is_none() {
            self.first_failure = Some(format!("{} (error {v:.3e})", what()));
        }
    }

    fn truth(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.err(if ok { 0.0 } else { f64::INFINITY }, what);
    }

    fn finish(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            passed: self.first_failure.is_none() && self.cases > 0,
            cases: self.cases,
            worst: self.worst,
            tolerance: self.tol,
            detail: self.first_failure.unwrap_or_default(),
            elapsed_ms: 0.0,
        }
    }
}

type CheckFn = fn(&Ctx) -> Result<CheckResult>;

struct Ctx {
    seed: u64,
    tile_matrix: Vec<TileConfig>,
    tiles: TileConfig,
    fault: Option<Fault>,
}

impl Ctx {
    fn rng(&self, tag: u64) -> Rng {
        Rng::new(self.seed).split(tag)
    }

    fn kernel_mask(&self, mask: &[bool]) -> Vec<bool> {
        let mut m = mask.to_vec();
        if self.fault == Some(Fault::FlipMaskBit) && !m.is_empty() {
            m[0] = !m[0];
        }
        m
    }
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("softmax_rows", check_softmax),
    ("rope_norms", check_rope),
    ("finite_diff_polynomial", check_fd_polynomial),
    ("local_attention_oracle", check_local_oracle),
    ("attention_causality", check_attention_causality),
    ("dense_backward_fd", check_dense_backward_fd),
    ("kernel_forward_oracle", check_kernel_forward),
    ("kernel_backward_oracle", check_kernel_backward),
    ("tile_visit_accounting", check_tile_accounting),
    ("kernel_stability", check_kernel_stability),
    ("router_ste_fd", check_router_ste),
    ("threshold_decision_monotone", check_decision_monotone),
    ("dense_equivalence_at_init", check_dense_equivalence),
    ("forcing_invariance", check_forcing_invariance),
    ("pruned_equals_pinned_threshold", check_pruned_pinned),
    ("model_causality", check_model_causality),
    ("sparsity_bookkeeping", check_sparsity_bookkeeping),
    ("loss_additivity", check_loss_additivity),
    ("router_gradient_identity", check_gradient_identity),
    ("ste_model_fd", check_model_fd),
    ("training_reproducibility", check_training_reproducibility),
    ("prefill_decode_equivalence", check_prefill_decode),
    ("kv_ledger_exactness", check_ledger),
    ("threshold_sweep_monotone", check_sweep),
    ("bench_closed_form", check_bench),
];

/// Names of every check in execution order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut tile_matrix = Vec::new();
    for bq in [1, 2, 4, 8] {
        for bk in [1, 2, 4, 8] {
            tile_matrix.push(TileConfig::new(bq, bk)?);
        }
    }
    if let Some(t) = cfg.tiles {
        t.validate()?;
        if !tile_matrix.contains(&t) {
            tile_matrix.push(t);
        }
    }
    let ctx = Ctx {
        seed: cfg.seed,
        tile_matrix,
        tiles: cfg.tiles.unwrap_or(TileConfig::new(4, 4)?),
        fault: cfg.fault,
    };
    let mut checks = Vec::new();
    for (name, f) in CHECKS {
        if !cfg.only.is_empty() && !cfg.only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let mut r = f(&ctx)?;
        r.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("{name}: {} ({:.0} ms)", if r.passed { "pass" } else { "FAIL" }, r.elapsed_ms);
        checks.push(r);
    }
    let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}

fn rand(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

fn mask_at_density(n: usize, density: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| rng.bernoulli(density)).collect()
}

fn tiny_model(rng: &mut Rng, layers: usize, trainable: TrainableSet) -> Result<ToyModel> {
    let cfg = ModelConfig {
        vocab: 13,
        d_model: 8,
        num_heads: 2,
        num_layers: layers,
        ffn_hidden: 12,
        window: 2,
        trainable,
        ..ModelConfig::default()
    };
    ToyModel::new(cfg, rng)
}

fn randomize_routers(model: &mut ToyModel, std: f32, rng: &mut Rng) {
    for b in &mut model.blocks {
        let d = b.l2a.router.w.cols();
        b.l2a.router.w = Matrix::random_normal(1, d, std, rng);
    }
}

fn tokens(n: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

fn check_softmax(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-6);
    let mut rng = ctx.rng(1);
    for case in 0..20 {
        let mut x = Matrix::random_normal(6, 9, 5.0, &mut rng);
        for c in 0..9 {
            x.set(0, c, f32::NEG_INFINITY);
        }
        let p = row_softmax(&x);
        t.truth(p.row(0).iter().all(|&v| v == 0.0), || format!("case {case}: fully masked row not exactly zero"));
        for r in 1..6 {
            let sum: f64 = p.row(r).iter().map(|&v| f64::from(v)).sum();
            t.err((sum - 1.0).abs(), || format!("case {case} row {r}: sum {sum}"));
        }
    }
    Ok(t.finish("softmax_rows"))
}

fn check_rope(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-6);
    let mut rng = ctx.rng(2);
    let cfg = RopeConfig::new(10_000.0, 8);
    for case in 0..10 {
        let x = rand(5, 8, &mut rng);
        let pos = positions(0..5);
        let y = apply_rope(&x, &pos, &cfg)?;
        t.truth(y.row(0) == x.row(0), || format!("case {case}: position 0 is not the identity"));
        for r in 0..5 {
            for pair in 0..4 {
                let n0 = x.get(r, 2 * pair).hypot(x.get(r, 2 * pair + 1));
                let n1 = y.get(r, 2 * pair).hypot(y.get(r, 2 * pair + 1));
                t.err(f64::from((n0 - n1).abs()) / f64::from(n0.max(1.0)), || format!("case {case} row {r} pair {pair}"));
            }
        }
    }
    Ok(t.finish("rope_norms"))
}

fn check_fd_polynomial(ctx: &Ctx) -> Result<CheckResult> {
    // f(x) = Σ a_i x_i³ has gradient 3 a_i x_i²; the central-difference
    // error is a_i h², so with h = 1e-2 the tolerance is loose on purpose.
    let mut t = Tally::new(5e-3);
    let mut rng = ctx.rng(3);
    for case in 0..5 {
        let x = rand(3, 4, &mut rng);
        let a = rand(3, 4, &mut rng);
        let f = |m: &Matrix| -> f64 {
            m.data().iter().zip(a.data()).map(|(&v, &c)| f64::from(c) * f64::from(v).powi(3)).sum()
        };
        let fd = finite_diff_grad(f, &x, 1e-2);
        let exact = Matrix::from_fn(3, 4, |r, c| 3.0 * a.get(r, c) * x.get(r, c).powi(2));
        t.err(relative_error(&fd, &exact, 1e-9), || format!("case {case}"));
    }
    Ok(t.finish("finite_diff_polynomial"))
}

/// Naive `f64` causal attention over `keys admitted by mask`.
fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: CausalMaskSpec) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    (0..q.rows())
        .map(|i| {
            let js: Vec<usize> = (0..=i).filter(|&j| mask.allows(i, j)).collect();
            let s: Vec<f64> = js
                .iter()
                .map(|&j| q.row(i).iter().zip(k.row(j)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>() * scale)
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..v.cols())
                .map(|c| js.iter().zip(&w).map(|(&j, &wj)| wj / z * f64::from(v.get(j, c))).sum())
                .collect()
        })
        .collect()
}

fn max_diff_f64(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut m = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            m = m.max((f64::from(a.get(r, c)) - x).abs());
        }
    }
    m
}

fn check_local_oracle(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-5);
    let mut rng = ctx.rng(4);
    for case in 0..12 {
        let n = 1 + rng.below(64);
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * [2, 4, 8][rng.below(3)];
        let w = rng.below(n + 2);
        let p = AttnParams::random(d, heads, 10_000.0, false, &mut rng)?;
        let x = rand(n, d, &mut rng);
        let got = sliding_window_attention(&x, &p, w)?;
        let (full_q, full_k, full_v) = (x.matmul(&p.w_q)?, x.matmul(&p.w_k)?, x.matmul(&p.w_v)?);
        let hd = d / heads;
        let mut concat = Matrix::zeros(n, d);
        for h in 0..heads {
            let o = naive_attention(
                &full_q.column_block(h * hd, hd),
                &full_k.column_block(h * hd, hd),
                &full_v.column_block(h * hd, hd),
                CausalMaskSpec::Window(w),
            );
            for (r, row) in o.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    concat.set(r, h * hd + c, v as f32);
                }
            }
        }
        let want = concat.matmul(&p.w_o)?;
        t.err(f64::from(got.max_abs_diff(&want)), || format!("case {case}: n={n} d={d} heads={heads} w={w}"));
        let (_, saved) = multi_head_attention(&x, &p, CausalMaskSpec::Window(w))?;
        for head in saved.heads() {
            let wts = head.weights();
            for r in 0..n {
                let row = wts.row(r);
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                t.err((sum - 1.0).abs(), || format!("case {case}: weight row {r} sums to {sum}"));
                t.truth(row.iter().all(|&v| v >= 0.0), || format!("case {case}: negative weight"));
            }
        }
    }
    Ok(t.finish("local_attention_oracle"))
}

fn check_attention_causality(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(5);
    for case in 0..10 {
        let n = 4 + rng.below(20);
        let p = AttnParams::random(8, 2, 10_000.0, true, &mut rng)?;
        let x = rand(n, 8, &mut rng);
        let w = rng.below(n);
        let base = sliding_window_attention(&x, &p, w)?;
        let j = rng.below(n);
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.set(j, c, x2.get(j, c) + 3.0);
        }
        let moved = sliding_window_attention(&x2, &p, w)?;
        for r in 0..j {
            t.truth(base.row(r) == moved.row(r), || format!("case {case}: row {r} changed after editing {j}"));
        }
    }
    Ok(t.finish("attention_causality"))
}

fn check_dense_backward_fd(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-3);
    let mut rng = ctx.rng(6);
    for case in 0..6 {
        let n = 3 + rng.below(8);
        let mask = if case % 2 == 0 { CausalMaskSpec::Global } else { CausalMaskSpec::Window(2) };
        let (q, k, v, probe) = (rand(n, 4, &mut rng), rand(n, 4, &mut rng), rand(n, 4, &mut rng), rand(n, 4, &mut rng));
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let a = dense_causal_attention(q, k, v, mask).expect("valid shapes");
            a.out.data().iter().zip(probe.data()).map(|(&o, &p)| f64::from(o) * f64::from(p)).sum()
        };
        let g = dense_causal_attention(&q, &k, &v, mask)?.backward(&probe)?;
        let fq = finite_diff_grad(|m| loss(m, &k, &v), &q, 1e-3);
        let fk = finite_diff_grad(|m| loss(&q, m, &v), &k, 1e-3);
        let fv = finite_diff_grad(|m| loss(&q, &k, m), &v, 1e-3);
        for (name, a, b) in [("d_q", &g.d_q, &fq), ("d_k", &g.d_k, &fk), ("d_v", &g.d_v, &fv)] {
            t.err(relative_error(a, b, 1e-6), || format!("case {case} n={n} {mask:?}: {name}"));
        }
    }
    Ok(t.finish("dense_backward_fd"))
}

const KERNEL_LENGTHS: [usize; 5] = [3, 8, 17, 33, 64];
const KERNEL_HEAD_DIMS: [usize; 2] = [4, 16];
const KERNEL_DENSITIES: [f64; 4] = [0.0, 0.1, 0.5, 1.0];

/// Visits every `(n, head_dim, density)` of the kernel matrix with fresh
/// inputs and a mask, then every tile shape.
fn for_kernel_matrix(ctx: &Ctx, tag: u64, mut f: impl FnMut(usize, usize, f64, TileConfig, &KernelCase) -> Result<()>) -> Result<()> {
    let mut rng = ctx.rng(tag);
    for &n in &KERNEL_LENGTHS {
        for &hd in &KERNEL_HEAD_DIMS {
            for &density in &KERNEL_DENSITIES {
                let case = KernelCase {
                    q: rand(n, hd, &mut rng),
                    k: rand(n, hd, &mut rng),
                    v: rand(n, hd, &mut rng),
                    d_o: rand(n, hd, &mut rng),
                    mask: mask_at_density(n, density, &mut rng),
                };
                for &tiles in &ctx.tile_matrix {
                    f(n, hd, density, tiles, &case)?;
                }
            }
        }
    }
    Ok(())
}

struct KernelCase {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    d_o: Matrix,
    mask: Vec<bool>,
}

fn check_kernel_forward(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-5);
    let mut reference: Option<(usize, usize, f64, Matrix)> = None;
    for_kernel_matrix(ctx, 7, |n, hd, density, tiles, c| {
        let oracle = dense_causal_attention(&c.q, &c.k, &c.v, CausalMaskSpec::Global)?;
        let cq = compact_queries(&c.q, &ctx.kernel_mask(&c.mask))?;
        let f = sparse_attention_forward(&cq, &c.k, &c.v, tiles)?;
        let full = scatter_outputs(&f.o_c, &cq.q_idx, n)?;
        let label = || format!("n={n} hd={hd} density={density} tiles={}x{}", tiles.b_q, tiles.b_k);
        let mut worst = 0.0f64;
        for r in 0..n {
            if c.mask[r] {
                for (a, b) in full.row(r).iter().zip(oracle.out.row(r)) {
                    worst = worst.max(f64::from((a - b).abs()));
                }
            } else if full.row(r).iter().any(|&x| x != 0.0) {
                worst = f64::INFINITY;
            }
        }
        for (i, &pos) in cq.q_idx.iter().enumerate() {
            let want = if c.mask[pos] { oracle.lse[pos] } else { f32::NEG_INFINITY };
            worst = worst.max(f64::from((f.lse_c[i] - want).abs()));
        }
        t.err(worst, label);
        // same inputs, every tile shape: outputs must agree
        match &reference {
            Some((rn, rhd, rd, r)) if *rn == n && *rhd == hd && *rd == density => {
                t.err(f64::from(full.max_abs_diff(r)), || format!("{}: tile-shape dependence", label()));
            }
            _ => reference = Some((n, hd, density, full)),
        }
        Ok(())
    })?;
    Ok(t.finish("kernel_forward_oracle"))
}

fn check_kernel_backward(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-4);
    for_kernel_matrix(ctx, 8, |n, hd, density, tiles, c| {
        let mut d_o = c.d_o.clone();
        for r in 0..n {
            if !c.mask[r] {
                d_o.row_mut(r).fill(0.0);
            }
        }
        let want = dense_causal_attention(&c.q, &c.k, &c.v, CausalMaskSpec::Global)?.backward(&d_o)?;
        let cq = compact_queries(&c.q, &ctx.kernel_mask(&c.mask))?;
        let f = sparse_attention_forward(&cq, &c.k, &c.v, tiles)?;
        let g = sparse_attention_backward(&SparseSaved::new(cq, c.k.clone(), c.v.clone(), &f), &c.d_o, tiles)?;
        let mut worst = f64::from(g.d_k.max_abs_diff(&want.d_k).max(g.d_v.max_abs_diff(&want.d_v)));
        for r in 0..n {
            for (a, b) in g.d_q_full.row(r).iter().zip(want.d_q.row(r)) {
                worst = worst.max(f64::from((a - b).abs()));
            }
        }
        t.err(worst, || format!("n={n} hd={hd} density={density} tiles={}x{}", tiles.b_q, tiles.b_k));
        Ok(())
    })?;
    Ok(t.finish("kernel_backward_oracle"))
}

fn check_tile_accounting(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(9);
    for case in 0..100 {
        let n = 1 + rng.below(64);
        let hd = [2, 4, 8][rng.below(3)];
        let tiles = TileConfig::new(1 + rng.below(9), 1 + rng.below(9))?;
        let density = rng.uniform();
        let (q, k, v) = (rand(n, hd, &mut rng), rand(n, hd, &mut rng), rand(n, hd, &mut rng));
        let mask = mask_at_density(n, density, &mut rng);
        let cq = compact_queries(&q, &mask)?;
        let f = sparse_attention_forward(&cq, &k, &v, tiles)?;
        let predicted = predicted_key_tile_visits(&cq.q_idx, tiles);
        t.truth(f.stats.key_tile_visits == predicted, || {
            format!("case {case}: visited {} tiles, formula gives {predicted}", f.stats.key_tile_visits)
        });
        // Keys after the last active query are never admissible; garbage
        // there must leave the output untouched bit for bit.
        if let Some(&last) = cq.q_idx.last() {
            let (mut k2, mut v2) = (k.clone(), v.clone());
            for r in last + 1..n {
                k2.row_mut(r).fill(1e6);
                v2.row_mut(r).fill(f32::NAN);
            }
            let g = sparse_attention_forward(&cq, &k2, &v2, tiles)?;
            t.truth(g.o_c == f.o_c && g.lse_c == f.lse_c, || format!("case {case}: keys past the last query changed outputs"));
        }
    }
    Ok(t.finish("tile_visit_accounting"))
}

fn check_kernel_stability(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-4);
    let mut rng = ctx.rng(10);
    for case in 0..8 {
        let n = 17 + rng.below(30);
        let hd = 16;
        // |q·k|/√d on the order of 10³
        let q = Matrix::random_normal(n, hd, 12.0, &mut rng);
        let k = Matrix::random_normal(n, hd, 12.0, &mut rng);
        let v = rand(n, hd, &mut rng);
        let mask = mask_at_density(n, 0.5, &mut rng);
        let cq = compact_queries(&q, &mask)?;
        let f = sparse_attention_forward(&cq, &k, &v, ctx.tiles)?;
        let want = naive_attention(&q, &k, &v, CausalMaskSpec::Global);
        t.truth(f.o_c.is_finite(), || format!("case {case}: non-finite output"));
        let rows: Vec<Vec<f64>> = cq.q_idx.iter().map(|&p| want[p].clone()).collect();
        t.err(max_diff_f64(&f.o_c, &rows), || format!("case {case}: n={n}"));
    }
    Ok(t.finish("kernel_stability"))
}

fn check_router_ste(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-3);
    let mut rng = ctx.rng(11);
    for case in 0..5 {
        let n = 4 + rng.below(8);
        let d = 3 + rng.below(6);
        let s = rand(n, d, &mut rng);
        let p = RouterParams { w: Matrix::random_normal(1, d, 0.5, &mut rng) };
        let up: Vec<f32> = (0..n).map(|_| rng.normal()).collect();
        let st = route(&s, &p, 0.5)?;
        let (dw, ds) = router_backward_ste(&s, &p, &st, &up)?;
        let relaxed = |s: &Matrix, w: &Matrix| -> f64 {
            (0..s.rows())
                .map(|r| {
                    let z: f64 = s.row(r).iter().zip(w.row(0)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                    f64::from(up[r]) / (1.0 + (-z).exp())
                })
                .sum()
        };
        let fw = finite_diff_grad(|w| relaxed(&s, w), &p.w, 1e-3);
        let fs = finite_diff_grad(|x| relaxed(x, &p.w), &s, 1e-3);
        t.err(relative_error(&dw, &fw, 1e-9), || format!("case {case}: d_w"));
        t.err(relative_error(&ds, &fs, 1e-9), || format!("case {case}: d_s"));
    }
    Ok(t.finish("router_ste_fd"))
}

fn check_decision_monotone(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(12);
    for case in 0..10 {
        let s = rand(40, 6, &mut rng);
        let p = RouterParams { w: Matrix::random_normal(1, 6, 1.0, &mut rng) };
        let mut prev = usize::MAX;
        for th in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0, 1.01] {
            let count = route(&s, &p, th)?.active_count();
            t.truth(count <= prev, || format!("case {case}: {count} active at threshold {th}, {prev} below it"));
            prev = count;
        }
    }
    Ok(t.finish("threshold_decision_monotone"))
}

fn check_dense_equivalence(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-5);
    let mut rng = ctx.rng(13);
    let model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
    for case in 0..20 {
        let toks = tokens(1 + rng.below(24), 13, &mut rng);
        let base = ForwardOptions::eval().with_tiles(ctx.tiles);
        let a = model_forward(&toks, &model, &base)?;
        let b = model_forward(&toks, &model, &base.clone().with_routing(RoutingOverride::AllOnes))?;
        t.err(f64::from(a.logits.max_abs_diff(&b.logits)), || format!("input {case}"));
        t.truth(a.traces.iter().all(|tr| tr.sparsity == 0.0), || format!("input {case}: zero router skipped tokens"));
    }
    Ok(t.finish("dense_equivalence_at_init"))
}

fn check_forcing_invariance(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(14);
    for case in 0..5 {
        let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
        randomize_routers(&mut model, 0.8, &mut rng);
        let toks = tokens(16, 13, &mut rng);
        let a = model_forward(&toks, &model, &ForwardOptions::train(vec![false; 2]).with_tiles(ctx.tiles))?;
        let b = model_forward(&toks, &model, &ForwardOptions::train(vec![true; 2]).with_tiles(ctx.tiles))?;
        t.truth(a.logits == b.logits, || format!("case {case}: forcing changed the forward output"));
    }
    Ok(t.finish("forcing_invariance"))
}

fn check_pruned_pinned(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(15);
    for case in 0..5 {
        let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
        randomize_routers(&mut model, 0.8, &mut rng);
        let toks = tokens(14, 13, &mut rng);
        let pinned = model_forward(&toks, &model, &ForwardOptions::eval().with_threshold(Some(1.01)))?;
        let mut pruned = model.clone();
        pruned.blocks.iter_mut().for_each(|b| b.l2a.prune());
        let p = model_forward(&toks, &pruned, &ForwardOptions::eval())?;
        t.truth(pinned.logits == p.logits, || format!("case {case}: pruned and pinned outputs differ"));
    }
    Ok(t.finish("pruned_equals_pinned_threshold"))
}

fn check_model_causality(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(16);
    for case in 0..8 {
        let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
        randomize_routers(&mut model, 0.8, &mut rng);
        let toks = tokens(20, 13, &mut rng);
        let j = rng.below(20);
        let mut edited = toks.clone();
        edited[j] = (edited[j] + 1) % 13;
        let opts = ForwardOptions::eval().with_tiles(ctx.tiles);
        let a = model_forward(&toks, &model, &opts)?;
        let b = model_forward(&edited, &model, &opts)?;
        for r in 0..j {
            t.truth(a.logits.row(r) == b.logits.row(r), || format!("case {case}: logits at {r} changed after editing {j}"));
        }
    }
    Ok(t.finish("model_causality"))
}

fn check_sparsity_bookkeeping(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(17);
    let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
    randomize_routers(&mut model, 1.0, &mut rng);
    let toks = tokens(48, 13, &mut rng);
    let mut prev: Option<(f64, u64)> = None;
    for th in [0.0, 0.2, 0.4, 0.6, 0.8, 1.01] {
        let f = model_forward(&toks, &model, &ForwardOptions::eval().with_threshold(Some(th)).with_tiles(ctx.tiles))?;
        for (l, tr) in f.traces.iter().enumerate() {
            let r = tr.routing.as_ref().expect("unpruned");
            let expect = 1.0 - r.active_count() as f64 / toks.len() as f64;
            t.truth(tr.sparsity == expect, || format!("layer {l} at {th}: reported {} vs {expect}", tr.sparsity));
        }
        let tr0 = &f.traces[0];
        if let Some((s, v)) = prev {
            if tr0.sparsity > s {
                t.truth(tr0.kernel.key_tile_visits <= v, || format!("tile visits rose with sparsity at {th}"));
            }
        }
        prev = Some((tr0.sparsity, tr0.kernel.key_tile_visits));
    }
    Ok(t.finish("sparsity_bookkeeping"))
}

fn check_loss_additivity(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(18);
    let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
    randomize_routers(&mut model, 0.8, &mut rng);
    let task = TaskSpec { kind: TaskKind::Copy, n: 16, vocab: 13, ..TaskSpec::default() };
    for case in 0..5 {
        let s = make_synthetic_task(&task, &mut rng)?;
        let f = model_forward(&s.tokens, &model, &ForwardOptions::eval())?;
        let l = compute_loss(&f.logits, &s.targets, &f.traces, 0.3)?;
        t.truth(l.parts.total == l.parts.ntp + l.parts.reg && l.parts.reg >= 0.0, || format!("case {case}: {:?}", l.parts));
    }
    Ok(t.finish("loss_additivity"))
}

fn check_gradient_identity(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(crate::training::IDENTITY_TOL);
    let mut rng = ctx.rng(19);
    let task = TaskSpec { kind: TaskKind::Copy, n: 14, vocab: 13, ..TaskSpec::default() };
    for case in 0..10 {
        let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
        randomize_routers(&mut model, 0.8, &mut rng);
        let sample = make_synthetic_task(&task, &mut rng)?;
        for forced in [true, false] {
            let r = verify_router_gradient_identity(&model, &sample, &IdentityCheck { forced, ..IdentityCheck::default() })?;
            for l in &r.layers {
                t.err(l.rel_err, || format!("model {case} forced={forced} layer {}", l.layer));
                t.truth(l.max_reg_dz <= 0.0, || format!("model {case}: regularizer raised a logit"));
            }
        }
        let starved = IdentityCheck { forced: false, threshold_override: Some(1.01), ..IdentityCheck::default() };
        let r = verify_router_gradient_identity(&model, &sample, &starved)?;
        for l in &r.layers {
            t.truth(l.ntp_term_norm == 0.0 && l.masked_ntp_mass == 0.0, || {
                format!("model {case} layer {}: masked tokens received NTP gradient", l.layer)
            });
            t.err(l.rel_err, || format!("model {case} all masked layer {}", l.layer));
        }
    }
    Ok(t.finish("router_gradient_identity"))
}

fn check_model_fd(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(2e-3);
    let mut rng = ctx.rng(20);
    let mut model = tiny_model(&mut rng, 2, TrainableSet::All)?;
    randomize_routers(&mut model, 0.7, &mut rng);
    let n = 10;
    let toks = tokens(n, 13, &mut rng);
    let r = rand(n, 13, &mut rng);
    let base = model_forward(&toks, &model, &ForwardOptions::eval())?;
    let dec: Vec<Vec<bool>> = base.traces.iter().map(|t| t.routing.clone().expect("routed").decisions).collect();
    let anchors: Vec<Vec<f32>> = base.traces.iter().map(|t| t.routing.clone().expect("routed").scores).collect();
    let opts = ForwardOptions::train(vec![true; 2])
        .with_routing(RoutingOverride::StraightThroughProbe { decisions: dec, anchors })
        .with_tiles(ctx.tiles);
    let probe = |m: &ToyModel| -> f64 {
        let f = model_forward(&toks, m, &opts).expect("valid probe forward");
        f.logits.data().iter().zip(r.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    };
    let f = model_forward(&toks, &model, &opts)?;
    let (g, _) = model_backward(&model, &f.saved, &r, None)?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _, _)| n).collect();
    for name in names {
        let x0 = model.tensor(&name).expect("listed tensor").clone();
        let eval = |x: &Matrix| {
            let mut m = model.clone();
            if let Some((_, slot, _)) = m.tensors_mut().into_iter().find(|(n, _, _)| *n == name) {
                *slot = x.clone();
            }
            probe(&m)
        };
        // Richardson extrapolation of two central differences cancels the
        // h² term, which otherwise dominates at steps large enough for f32.
        let mut fd = finite_diff_grad(eval, &x0, 1e-2);
        let coarse = finite_diff_grad(eval, &x0, 2e-2);
        fd.scale(4.0 / 3.0);
        fd.add_scaled(&coarse, -1.0 / 3.0)?;
        let grad = g.get(&name).expect("gradient for every tensor");
        t.err(relative_error(grad, &fd, 1e-6), || format!("tensor {name}"));
    }
    Ok(t.finish("ste_model_fd"))
}

fn check_training_reproducibility(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(21);
    let model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
    let task = TaskSpec { kind: TaskKind::Copy, n: 12, vocab: 13, ..TaskSpec::default() };
    let cfg = TrainConfig { steps: 4, batch_size: 2, force_p: 0.5, seed: ctx.seed, ..TrainConfig::default() };
    let run = || -> Result<(Vec<crate::training::StepReport>, ToyModel)> {
        let mut m = model.clone();
        let mut tr = Trainer::new(cfg.clone(), &m)?;
        let mut reports = Vec::new();
        for _ in 0..cfg.steps {
            let batch = tr.batch(&task)?;
            reports.push(tr.train_step(&mut m, &batch)?);
        }
        Ok((reports, m))
    };
    let (a, ma) = run()?;
    let (b, mb) = run()?;
    t.truth(a == b && ma == mb, || "step reports or parameters differ between identical runs".into());
    Ok(t.finish("training_reproducibility"))
}

fn check_prefill_decode(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(1e-4);
    let mut rng = ctx.rng(22);
    for case in 0..10 {
        let mut model = tiny_model(&mut rng, 3, TrainableSet::TokenMixing)?;
        randomize_routers(&mut model, 1.0, &mut rng);
        if case % 2 == 1 {
            model.blocks[case % 3].l2a.prune();
        }
        let n = 6 + rng.below(20);
        let toks = tokens(n, 13, &mut rng);
        let full = model_forward(&toks, &model, &ForwardOptions::eval().with_tiles(ctx.tiles))?;
        let prompt = 1 + rng.below(n);
        let decoded = prefill_then_decode(&model, &toks, prompt, ctx.tiles)?;
        t.err(f64::from(decoded.max_abs_diff(&full.logits)), || {
            format!("model {case}: prompt {prompt} of {n}, pruned {:?}", model.pruned_layers())
        });
    }
    Ok(t.finish("prefill_decode_equivalence"))
}

fn check_ledger(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(23);
    for case in 0..4 {
        let mut model = tiny_model(&mut rng, 3, TrainableSet::TokenMixing)?;
        randomize_routers(&mut model, 1.0, &mut rng);
        model.blocks[case % 3].l2a.prune();
        let toks = tokens(20, 13, &mut rng);
        let mut p = prefill(&model, &toks[..3], None, ctx.tiles)?;
        for (i, &tok) in toks[3..].iter().enumerate() {
            let (_, traces) = decode_step(&model, &mut p.cache, tok)?;
            let ledger = KvCacheLedger::from_cache(&model, &p.cache);
            t.truth(ledger == KvCacheLedger::predicted(&model, i + 4), || format!("case {case} step {i}: ledger mismatch"));
            for (l, (tr, lc)) in traces.iter().zip(&p.cache.layers).enumerate() {
                if tr.decision == Some(false) {
                    t.truth(tr.global_macs == 0, || format!("case {case} layer {l}: skipped token spent global work"));
                }
                t.truth(lc.local_entries() <= model.blocks[l].l2a.window + 1, || "local cache exceeds window".into());
            }
        }
    }
    Ok(t.finish("kv_ledger_exactness"))
}

fn check_sweep(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let mut rng = ctx.rng(24);
    let mut model = tiny_model(&mut rng, 2, TrainableSet::TokenMixing)?;
    randomize_routers(&mut model, 1.0, &mut rng);
    let task = TaskSpec { kind: TaskKind::Copy, n: 24, vocab: 13, ..TaskSpec::default() };
    let samples = make_batch(&task, 4, &rng)?;
    let r = threshold_sweep(&model, &samples, &[0.0, 0.25, 0.5, 0.75, 1.01], &ForwardOptions::eval().with_tiles(ctx.tiles))?;
    t.truth(r.first_layer_monotone, || "first-layer sparsity decreased".into());
    t.truth(r.macs_track_sparsity, || "global MACs did not fall with rising sparsity".into());
    let (first, last) = (&r.points[0], &r.points[r.points.len() - 1]);
    t.truth(first.layer_sparsity.iter().all(|&s| s == 0.0), || "threshold 0 skipped tokens".into());
    t.truth(last.layer_sparsity.iter().all(|&s| s == 1.0) && last.global_macs == 0, || "threshold above 1 kept tokens".into());
    Ok(t.finish("threshold_sweep_monotone"))
}

fn check_bench(ctx: &Ctx) -> Result<CheckResult> {
    let mut t = Tally::new(0.0);
    let cfg = BenchConfig {
        lengths: vec![33, 200],
        sparsities: vec![0.0, 0.25, 0.9, 1.0],
        tiles: ctx.tiles,
        seed: ctx.seed,
        ..BenchConfig::default()
    };
    let r = run_bench(&cfg)?;
    for row in &r.rows {
        t.truth(row.matches_model(), || format!("n={} sparsity={}: counters disagree with closed form", row.n, row.sparsity));
        if row.sparsity == 0.0 {
            t.truth(row.reduction_ratio == 1.0, || "dense row does not have ratio 1".into());
        }
        if row.sparsity == 1.0 {
            t.truth(row.macs == 0, || "fully sparse row spent MACs".into());
        }
    }
    Ok(t.finish("bench_closed_form"))
}
