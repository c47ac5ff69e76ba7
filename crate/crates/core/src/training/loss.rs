use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layer::LayerTrace;
use crate::numcore::Matrix;

/// `total = ntp + reg`, with `reg = λ/(nL) · Σ_l Σ_t d̂²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ntp: f64,
    pub reg: f64,
}

/// Loss value plus the gradients the backward pass needs.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub parts: LossParts,
    pub d_logits: Matrix,
    /// `∂reg/∂d̂_{l,t} = 2λ/(nL) · d̂_{l,t}`; empty vectors for pruned layers.
    pub d_dhat: Vec<Vec<f32>>,
}

/// Number of layers that contribute to the regularizer (pruned layers have
/// no router).
fn routed_layers(traces: &[LayerTrace]) -> usize {
    traces.iter().filter(|t| t.routing.is_some()).count()
}

/// Mean cross-entropy over labelled positions plus the sparsity regularizer.
/// Unlabelled positions (`None`) contribute nothing; a sequence with no
/// labels has `ntp = 0`.
pub fn compute_loss(
    logits: &Matrix,
    targets: &[Option<usize>],
    traces: &[LayerTrace],
    lambda_reg: f64,
) -> Result<LossGrad> {
    let n = logits.rows();
    let vocab = logits.cols();
    if targets.len() != n {
        return Err(shape_err("compute_loss", format!("{} targets for {n} positions", targets.len())));
    }
    if !(lambda_reg >= 0.0) {
        return Err(Error::Config(format!("lambda_reg must be nonnegative, got {lambda_reg}")));
    }
    let labelled = targets.iter().filter(|t| t.is_some()).count();
    let mut d_logits = Matrix::zeros(n, vocab);
    let mut ntp = 0.0f64;
    if labelled > 0 {
        let inv = 1.0 / labelled as f64;
        for (t, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= vocab {
                return Err(Error::OutOfRange(format!("target {y} >= vocab {vocab}")));
            }
            let row = logits.row(t);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            ntp += (lse - row[y] as f64) * inv;
            let drow = d_logits.row_mut(t);
            for (d, &v) in drow.iter_mut().zip(row) {
                *d = (((v as f64 - lse).exp()) * inv) as f32;
            }
            drow[y] -= inv as f32;
        }
    }

    let layers = routed_layers(traces);
    let mut reg = 0.0f64;
    let mut d_dhat = Vec::with_capacity(traces.len());
    let coef = if layers > 0 { lambda_reg / (n as f64 * layers as f64) } else { 0.0 };
    for trace in traces {
        match &trace.routing {
            Some(state) => {
                if state.scores.len() != n {
                    return Err(shape_err("compute_loss", "router scores do not match sequence length"));
                }
                reg += coef * state.scores.iter().map(|&s| (s as f64).powi(2)).sum::<f64>();
                d_dhat.push(state.scores.iter().map(|&s| (2.0 * coef * s as f64) as f32).collect());
            }
            None => d_dhat.push(Vec::new()),
        }
    }
    if !ntp.is_finite() || !reg.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss (ntp {ntp}, reg {reg})")));
    }
    Ok(LossGrad {
        parts: LossParts {
            total: ntp + reg,
            ntp,
            reg,
        },
        d_logits,
        d_dhat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelStats;
    use crate::router::RoutingState;

    fn trace(scores: Vec<f32>) -> LayerTrace {
        LayerTrace {
            routing: Some(RoutingState {
                decisions: scores.iter().map(|&s| s >= 0.5).collect(),
                scores,
                threshold: 0.5,
                forced_global: false,
            }),
            sparsity: 0.0,
            kernel: KernelStats::default(),
        }
    }

    #[test]
    fn closed_forms() {
        let v = 7;
        let logits = Matrix::zeros(3, v);
        let targets = vec![Some(1), None, Some(4)];
        let traces = vec![trace(vec![0.5; 3]), trace(vec![0.5; 3])];
        let l = compute_loss(&logits, &targets, &traces, 0.0).unwrap();
        assert!((l.parts.ntp - (v as f64).ln()).abs() < 1e-12);
        assert_eq!(l.parts.total, l.parts.ntp);
        let l = compute_loss(&logits, &targets, &traces, 1.0).unwrap();
        assert!((l.parts.reg - 0.25).abs() < 1e-12);
        let one = compute_loss(&Matrix::zeros(5, v), &[None; 5], &[trace(vec![0.5; 5])], 1.0).unwrap();
        assert!((one.parts.reg - 0.25).abs() < 1e-12);
        assert_eq!(one.parts.ntp, 0.0);
    }

    #[test]
    fn gradients_match_differences() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 0.0, -0.5]]).unwrap();
        let targets = vec![Some(2), Some(0)];
        let traces = vec![trace(vec![0.2, 0.9])];
        let l = compute_loss(&logits, &targets, &traces, 0.7).unwrap();
        let fd = crate::numcore::finite_diff_grad(
            |x| compute_loss(x, &targets, &traces, 0.7).unwrap().parts.ntp,
            &logits,
            1e-3,
        );
        assert!(crate::numcore::relative_error(&l.d_logits, &fd, 1e-9) < 1e-3);
        // d reg / d d̂ = 2λ/(nL) d̂
        assert!((l.d_dhat[0][1] - 2.0 * 0.7 / 2.0 * 0.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let logits = Matrix::zeros(2, 3);
        assert!(compute_loss(&logits, &[Some(0)], &[], 0.0).is_err());
        assert!(compute_loss(&logits, &[Some(3), None], &[], 0.0).is_err());
        assert!(compute_loss(&logits, &[None, None], &[], -1.0).is_err());
    }
}
