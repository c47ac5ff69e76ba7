//! Term-by-term check of the router weight gradient.
//!
//! For layer `l` with router input `s_t`, score `d̂_t` and global output `a_t`:
//!
//! ```text
//! ∂L/∂W = Σ_t [ (∂L_NTP/∂o_t)ᵀ a_t + 2λ/(nL) · d̂_t ] · d̂_t (1 − d̂_t) · s_tᵀ
//! ```
//!
//! The regularizer part alone moves the logit `z_t = W s_t` by
//! `Δz_t = −η · 2λ/(nL) · d̂_t² (1 − d̂_t) ‖s_t‖²` (self term), which is never
//! positive: the penalty only ever pushes tokens toward local attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::TileConfig;
use crate::layer::{model_backward, model_forward, ForwardOptions, Mode, ToyModel};
use crate::training::loss::compute_loss;
use crate::training::tasks::Sample;

/// Default tolerance on the norm-wise relative error.
pub const IDENTITY_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lambda_reg: f64,
    /// Compute global attention for every token (the forced step).
    pub forced: bool,
    pub threshold_override: Option<f32>,
    pub lr_for_dz: f64,
    pub tol: f64,
}

impl Default for IdentityCheck {
    fn default() -> Self {
        Self {
            lambda_reg: 0.5,
            forced: true,
            threshold_override: None,
            lr_for_dz: 1e-2,
            tol: IDENTITY_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerIdentity {
    pub layer: usize,
    /// Norm-wise relative error between assembled and backprop `∂L/∂W`.
    pub rel_err: f64,
    pub max_abs_diff: f64,
    pub ntp_term_norm: f64,
    pub reg_term_norm: f64,
    /// `Σ_t |(∂L_NTP/∂o_t)ᵀ a_t|` over tokens with `d_t = 0`.
    pub masked_ntp_mass: f64,
    /// Largest regularizer-induced `Δz_t`; must be ≤ 0.
    pub max_reg_dz: f64,
    pub masked_tokens: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub layers: Vec<LayerIdentity>,
    pub pass: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Assembles the router gradient of every unpruned layer from per-token
/// pieces and compares it with backprop.
pub fn verify_router_gradient_identity(
    model: &ToyModel,
    sample: &Sample,
    check: &IdentityCheck,
) -> Result<IdentityReport> {
    let l_total = model.num_layers();
    let opts = ForwardOptions {
        mode: Mode::Train,
        forced: vec![check.forced; l_total],
        threshold_override: check.threshold_override,
        tiles: TileConfig::new(4, 4)?,
        ..ForwardOptions::eval()
    };
    let f = model_forward(&sample.tokens, model, &opts)?;
    let loss = compute_loss(&f.logits, &sample.targets, &f.traces, check.lambda_reg)?;
    let (grads, trace) = model_backward(model, &f.saved, &loss.d_logits, Some(&loss.d_dhat))?;

    let n = sample.tokens.len() as f64;
    let routed = f.traces.iter().filter(|t| t.routing.is_some()).count() as f64;
    let coef = if routed > 0.0 { 2.0 * check.lambda_reg / (n * routed) } else { 0.0 };

    let mut layers = Vec::new();
    for (l, ((saved, block), d_o)) in f
        .saved
        .layers()
        .iter()
        .zip(&model.blocks)
        .zip(&trace.d_layer_out)
        .enumerate()
    {
        let Some(state) = saved.routing() else { continue };
        let s = saved.router_input(&block.l2a);
        let a = saved.global_output();
        let d = s.cols();
        let mut ntp_term = vec![0.0f64; d];
        let mut reg_term = vec![0.0f64; d];
        let mut masked_ntp_mass = 0.0;
        let mut max_reg_dz = f64::NEG_INFINITY;
        for t in 0..s.rows() {
            let dh = state.scores[t] as f64;
            let sig = dh * (1.0 - dh);
            let ntp: f64 = d_o.row(t).iter().zip(a.row(t)).map(|(&x, &y)| x as f64 * y as f64).sum();
            let reg = coef * dh;
            if !state.decisions[t] {
                masked_ntp_mass += ntp.abs();
            }
            let s_norm2: f64 = s.row(t).iter().map(|&x| (x as f64).powi(2)).sum();
            max_reg_dz = max_reg_dz.max(-check.lr_for_dz * reg * sig * s_norm2);
            for (c, &x) in s.row(t).iter().enumerate() {
                ntp_term[c] += ntp * sig * x as f64;
                reg_term[c] += reg * sig * x as f64;
            }
        }
        let assembled: Vec<f64> = ntp_term.iter().zip(&reg_term).map(|(a, b)| a + b).collect();
        let backprop: Vec<f64> = grads.router_w(l).row(0).iter().map(|&x| x as f64).collect();
        let diff: Vec<f64> = assembled.iter().zip(&backprop).map(|(a, b)| a - b).collect();
        let max_abs_diff = diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let rel_err = norm(&diff) / norm(&assembled).max(norm(&backprop)).max(1e-12);
        let masked_tokens = state.decisions.iter().filter(|&&x| !x).count();
        let starved_ok = check.forced || masked_ntp_mass == 0.0;
        layers.push(LayerIdentity {
            layer: l,
            rel_err,
            max_abs_diff,
            ntp_term_norm: norm(&ntp_term),
            reg_term_norm: norm(&reg_term),
            masked_ntp_mass,
            max_reg_dz,
            masked_tokens,
            pass: rel_err <= check.tol && max_reg_dz <= 0.0 && starved_ok,
        });
    }
    if layers.is_empty() {
        return Err(Error::Config("every layer is pruned; no router to check".into()));
    }
    let pass = layers.iter().all(|l| l.pass);
    Ok(IdentityReport { layers, pass })
}
