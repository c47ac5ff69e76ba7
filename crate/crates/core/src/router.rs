//! Per-token routing: `d̂_t = σ(w · s_t)`, `d_t = [d̂_t ≥ threshold]`.
//!
//! Gradients use the straight-through estimator: the forward pass uses the
//! binary `d_t`, the backward pass differentiates through `d̂_t`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// `[1 × d]`, zero at initialization so every token routes to global
    /// attention.
    pub w: Matrix,
}

impl RouterParams {
    pub fn zeros(d: usize) -> Self {
        Self { w: Matrix::zeros(1, d) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    /// Router scores `d̂_t ∈ [0, 1]`.
    pub scores: Vec<f32>,
    /// Binary decisions `d_t`.
    pub decisions: Vec<bool>,
    pub threshold: f32,
    /// Whether global attention is computed for every token this step.
    pub forced_global: bool,
}

impl RoutingState {
    pub fn active_count(&self) -> usize {
        self.decisions.iter().filter(|&&d| d).count()
    }

    /// Fraction of tokens that skip global attention.
    pub fn sparsity(&self) -> f64 {
        if self.decisions.is_empty() {
            return 0.0;
        }
        1.0 - self.active_count() as f64 / self.decisions.len() as f64
    }
}

/// Scores every row of `s` and thresholds with `≥` (ties route to global).
///
/// Any finite threshold is accepted: thresholds outside `(0, 1)` pin the
/// decisions to all-on (`≤ 0`) or all-off (`> 1`).
pub fn route(s: &Matrix, p: &RouterParams, threshold: f32) -> Result<RoutingState> {
    if p.w.shape() != (1, s.cols()) {
        return Err(shape_err(
            "route",
            format!("router weight {:?} for inputs with {} columns", p.w.shape(), s.cols()),
        ));
    }
    if !threshold.is_finite() {
        return Err(Error::Config(format!("router threshold must be finite, got {threshold}")));
    }
    let w = p.w.row(0);
    let scores: Vec<f32> = (0..s.rows())
        .map(|t| sigmoid(crate::attn_ref::dot(w, s.row(t))))
        .collect();
    let decisions = scores.iter().map(|&x| x >= threshold).collect();
    Ok(RoutingState {
        scores,
        decisions,
        threshold,
        forced_global: false,
    })
}

/// Straight-through gradients given upstream `∂L/∂d̂_t`. Returns `(d_w, d_s)`.
pub fn router_backward_ste(
    s: &Matrix,
    p: &RouterParams,
    state: &RoutingState,
    d_wrt_dhat: &[f32],
) -> Result<(Matrix, Matrix)> {
    let n = s.rows();
    if d_wrt_dhat.len() != n || state.scores.len() != n || p.w.cols() != s.cols() {
        return Err(shape_err(
            "router_backward_ste",
            format!("{} upstream values, {} scores, {n} rows", d_wrt_dhat.len(), state.scores.len()),
        ));
    }
    let d = s.cols();
    let mut d_w = Matrix::zeros(1, d);
    let mut d_s = Matrix::zeros(n, d);
    let w = p.w.row(0);
    for t in 0..n {
        let dh = state.scores[t];
        let g = d_wrt_dhat[t] * dh * (1.0 - dh);
        if g == 0.0 {
            continue;
        }
        for (acc, &x) in d_w.row_mut(0).iter_mut().zip(s.row(t)) {
            *acc += g * x;
        }
        for (ds, &wv) in d_s.row_mut(t).iter_mut().zip(w) {
            *ds = g * wv;
        }
    }
    Ok((d_w, d_s))
}

/// One Bernoulli draw deciding whether this step computes global attention
/// for every token.
pub fn sample_forced_global(rng: &mut Rng, p_force: f64) -> bool {
    if p_force <= 0.0 {
        return false;
    }
    if p_force >= 1.0 {
        return true;
    }
    rng.bernoulli(p_force)
}

/// `(compute_mask, output_mask)`: which queries the kernel computes and
/// which outputs are kept. Forcing changes only the former.
pub fn effective_decisions(state: &RoutingState) -> (Vec<bool>, Vec<bool>) {
    let output = state.decisions.clone();
    let compute = if state.forced_global {
        vec![true; output.len()]
    } else {
        output.clone()
    };
    (compute, output)
}
