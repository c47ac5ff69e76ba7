use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::Matrix;

/// Row-wise softmax with max subtraction. Rows that are entirely `-inf`
/// (fully masked) produce all-zero rows.
pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row statistics saved by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f32>,
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` per row, with a two-pass
/// (biased) variance.
pub fn layer_norm(
    x: &Matrix,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("{d} columns, gamma {}, beta {}", gamma.len(), beta.len()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(r);
        for (n, &v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * rstd;
        }
        let nrow = normalized.row(r).to_vec();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = gamma[c] * nrow[c] + beta[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f32],
    d_out: &Matrix,
) -> Result<(Matrix, Vec<f32>, Vec<f32>)> {
    let (n, d) = cache.normalized.shape();
    if d_out.shape() != (n, d) || gamma.len() != d {
        return Err(shape_err(
            "layer_norm_backward",
            format!("cache {:?}, d_out {:?}", (n, d), d_out.shape()),
        ));
    }
    let mut d_x = Matrix::zeros(n, d);
    let mut d_gamma = vec![0.0f32; d];
    let mut d_beta = vec![0.0f32; d];
    let mut d_hat = vec![0.0f32; d];
    for r in 0..n {
        let xh = cache.normalized.row(r);
        let dy = d_out.row(r);
        let mut mean_dh = 0.0f32;
        let mut mean_dh_xh = 0.0f32;
        for c in 0..d {
            d_gamma[c] += dy[c] * xh[c];
            d_beta[c] += dy[c];
            d_hat[c] = dy[c] * gamma[c];
            mean_dh += d_hat[c];
            mean_dh_xh += d_hat[c] * xh[c];
        }
        mean_dh /= d as f32;
        mean_dh_xh /= d as f32;
        let rstd = cache.inv_std[r];
        for (c, o) in d_x.row_mut(r).iter_mut().enumerate() {
            *o = rstd * (d_hat[c] - mean_dh - xh[c] * mean_dh_xh);
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

/// Rotary position embedding settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub base_frequency: f64,
    pub head_dim: usize,
    pub enabled: bool,
}

impl RopeConfig {
    pub fn new(base_frequency: f64, head_dim: usize) -> Self {
        Self {
            base_frequency,
            head_dim,
            enabled: true,
        }
    }

    pub fn disabled(head_dim: usize) -> Self {
        Self {
            base_frequency: 10_000.0,
            head_dim,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be even, got {}",
                self.head_dim
            )));
        }
        if !(self.base_frequency > 0.0) {
            return Err(Error::Config(format!(
                "rope base_frequency must be > 0, got {}",
                self.base_frequency
            )));
        }
        Ok(())
    }

    /// `(cos, sin)` of the rotation for pair `i` at `position`.
    #[inline]
    pub fn rotation(&self, position: f64, pair: usize) -> (f32, f32) {
        let exponent = -2.0 * pair as f64 / self.head_dim as f64;
        let angle = position * self.base_frequency.powf(exponent);
        (angle.cos() as f32, angle.sin() as f32)
    }
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every row by
/// `θ_i = pos · base^(−2i/head_dim)`.
pub fn apply_rope(x: &Matrix, positions: &[f64], cfg: &RopeConfig) -> Result<Matrix> {
    rotate(x, positions, cfg, 1.0)
}

/// Transpose of [`apply_rope`]; maps output gradients to input gradients.
pub fn apply_rope_inverse(x: &Matrix, positions: &[f64], cfg: &RopeConfig) -> Result<Matrix> {
    rotate(x, positions, cfg, -1.0)
}

fn rotate(x: &Matrix, positions: &[f64], cfg: &RopeConfig, sign: f32) -> Result<Matrix> {
    cfg.validate()?;
    if x.cols() != cfg.head_dim {
        return Err(shape_err(
            "apply_rope",
            format!("{} columns for head_dim {}", x.cols(), cfg.head_dim),
        ));
    }
    if positions.len() != x.rows() {
        return Err(shape_err(
            "apply_rope",
            format!("{} positions for {} rows", positions.len(), x.rows()),
        ));
    }
    let mut out = x.clone();
    if !cfg.enabled {
        return Ok(out);
    }
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..cfg.head_dim / 2 {
            let (c, s) = cfg.rotation(pos, i);
            let s = sign * s;
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

pub fn positions(range: std::ops::Range<usize>) -> Vec<f64> {
    range.map(|p| p as f64).collect()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/π)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn softmax_closed_forms() {
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0, f32::NEG_INFINITY],
            vec![1000.0, 1000.0, f32::NEG_INFINITY],
            vec![2f32.ln(), 0.0, f32::NEG_INFINITY],
            vec![f32::NEG_INFINITY; 3],
        ])
        .unwrap();
        let p = row_softmax(&x);
        assert_eq!(p.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.5, 0.0]);
        assert!((p.get(2, 0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.get(2, 1) - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(p.get(2, 2), 0.0);
        assert_eq!(p.row(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let x = Matrix::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.row(0), &[0.0, 0.0, 0.0]);

        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-6 && (y.get(0, 1) + 1.0).abs() < 1e-6);

        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 2], 1e-5).is_err());
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_two_pass_f64() {
        let mut rng = Rng::new(5);
        let x = Matrix::random_normal(4, 9, 2.0, &mut rng);
        let (y, _) = layer_norm(&x, &[1.0; 9], &[0.0; 9], 1e-5).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = x.row(r).iter().map(|&v| f64::from(v)).collect();
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            for c in 0..9 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt();
                assert!((f64::from(y.get(r, c)) - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
            let m = y.row(r).iter().sum::<f32>() / 9.0;
            let v = y.row(r).iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 9.0;
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn rope_unit_rotation_and_identity_at_zero() {
        let cfg = RopeConfig::new(1.0, 2);
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = apply_rope(&x, &[std::f64::consts::FRAC_PI_2], &cfg).unwrap();
        assert!(y.get(0, 0).abs() < 1e-7 && (y.get(0, 1) - 1.0).abs() < 1e-7);

        let mut rng = Rng::new(2);
        let x = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let cfg = RopeConfig::new(10_000.0, 8);
        assert_eq!(apply_rope(&x, &[0.0; 3], &cfg).unwrap(), x);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let cfg = RopeConfig::new(10_000.0, 3);
        assert!(apply_rope(&Matrix::zeros(1, 3), &[0.0], &cfg).is_err());
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut rng = Rng::new(9);
        let x = Matrix::random_normal(5, 6, 1.0, &mut rng);
        let cfg = RopeConfig::new(500.0, 6);
        let pos = positions(10..15);
        let back = apply_rope_inverse(&apply_rope(&x, &pos, &cfg).unwrap(), &pos, &cfg).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-3f64;
            let g = |v: f64| {
                let v = v as f32;
                f64::from(gelu(v))
            };
            let fd = (g(f64::from(x) + h) - g(f64::from(x) - h)) / (2.0 * h);
            assert!((fd - f64::from(gelu_grad(x))).abs() < 1e-3);
        }
    }
}
