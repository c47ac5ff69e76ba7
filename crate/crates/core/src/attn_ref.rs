//! Reference attention: dense causal (global) and sliding-window (local)
//! attention with analytic backward passes.
//!
//! These serve both as model components and as the correctness oracle for
//! the tiled kernel in [`crate::kernel`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{apply_rope, apply_rope_inverse, positions, Matrix, RopeConfig, Rng};

/// Which keys a query may see. `Window(w)` admits key `j` for query `i`
/// iff `0 ≤ i − j ≤ w`, i.e. the token itself plus `w` predecessors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CausalMaskSpec {
    Global,
    Window(usize),
}

impl CausalMaskSpec {
    /// First admissible key position for a query at `pos`.
    #[inline]
    pub fn key_start(&self, pos: usize) -> usize {
        match *self {
            CausalMaskSpec::Global => 0,
            CausalMaskSpec::Window(w) => pos.saturating_sub(w),
        }
    }

    pub fn allows(&self, query_pos: usize, key_pos: usize) -> bool {
        key_pos <= query_pos && key_pos >= self.key_start(query_pos)
    }
}

/// Gradients with respect to the attention inputs.
#[derive(Clone, Debug)]
pub struct QkvGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

/// Output and saved state of [`dense_causal_attention`].
///
/// Attention weights are stored per query row over its admissible key range
/// only, so window attention costs `O(n·w)` rather than `O(n²)`.
#[derive(Clone, Debug)]
pub struct DenseAttention {
    pub out: Matrix,
    pub lse: Vec<f32>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    offset: usize,
    mask: CausalMaskSpec,
    starts: Vec<usize>,
    probs: Vec<Vec<f32>>,
}

/// `softmax(QKᵀ/√d + M)V` for `q` rows aligned to the last `q.rows()` key
/// positions. Returns the output together with per-row log-sum-exp.
pub fn dense_causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: CausalMaskSpec,
) -> Result<DenseAttention> {
    let hd = q.cols();
    if k.cols() != hd || v.cols() != hd {
        return Err(shape_err(
            "dense_causal_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if k.rows() != v.rows() || q.rows() > k.rows() {
        return Err(shape_err(
            "dense_causal_attention",
            format!("{} queries over {} keys / {} values", q.rows(), k.rows(), v.rows()),
        ));
    }
    let offset = k.rows() - q.rows();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Matrix::zeros(q.rows(), hd);
    let mut lse = Vec::with_capacity(q.rows());
    let mut starts = Vec::with_capacity(q.rows());
    let mut probs = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let pos = offset + i;
        let start = mask.key_start(pos);
        let qi = q.row(i);
        let mut p: Vec<f32> = (start..=pos)
            .map(|j| dot(qi, k.row(j)) * scale)
            .collect();
        let max = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for s in &mut p {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in &mut p {
            *s /= sum;
        }
        lse.push(max + sum.ln());
        let orow = out.row_mut(i);
        for (jj, &w) in p.iter().enumerate() {
            for (o, &vv) in orow.iter_mut().zip(v.row(start + jj)) {
                *o += w * vv;
            }
        }
        starts.push(start);
        probs.push(p);
    }
    Ok(DenseAttention {
        out,
        lse,
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        offset,
        mask,
        starts,
        probs,
    })
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl DenseAttention {
    pub fn mask(&self) -> CausalMaskSpec {
        self.mask
    }

    pub fn keys(&self) -> &Matrix {
        &self.k
    }

    pub fn values(&self) -> &Matrix {
        &self.v
    }

    /// The full `[n_q × n_k]` attention-weight matrix.
    pub fn weights(&self) -> Matrix {
        let mut w = Matrix::zeros(self.q.rows(), self.k.rows());
        for (i, p) in self.probs.iter().enumerate() {
            for (jj, &pv) in p.iter().enumerate() {
                w.set(i, self.starts[i] + jj, pv);
            }
        }
        w
    }

    /// Analytic gradients of the forward output with respect to `q`, `k`, `v`.
    pub fn backward(&self, d_out: &Matrix) -> Result<QkvGrads> {
        if d_out.shape() != self.out.shape() {
            return Err(Error::StateMismatch(format!(
                "d_out {:?} for attention output {:?}",
                d_out.shape(),
                self.out.shape()
            )));
        }
        let hd = self.q.cols();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut d_q = Matrix::zeros(self.q.rows(), hd);
        let mut d_k = Matrix::zeros(self.k.rows(), hd);
        let mut d_v = Matrix::zeros(self.v.rows(), hd);
        for i in 0..self.q.rows() {
            let pos = self.offset + i;
            let start = self.starts[i];
            let p = &self.probs[i];
            let dout = d_out.row(i);
            // D_i = dO_i · O_i = Σ_j P_ij (dO_i · v_j)
            let di = dot(dout, self.out.row(i));
            let qi = self.q.row(i).to_vec();
            for (jj, j) in (start..=pos).enumerate() {
                let pij = p[jj];
                for (dv, &g) in d_v.row_mut(j).iter_mut().zip(dout) {
                    *dv += pij * g;
                }
                let dp = dot(dout, self.v.row(j));
                let ds = pij * (dp - di) * scale;
                if ds != 0.0 {
                    let kj = self.k.row(j);
                    for (dq, &kv) in d_q.row_mut(i).iter_mut().zip(kj) {
                        *dq += ds * kv;
                    }
                    for (dk, &qv) in d_k.row_mut(j).iter_mut().zip(&qi) {
                        *dk += ds * qv;
                    }
                }
            }
        }
        Ok(QkvGrads { d_q, d_k, d_v })
    }
}

/// Projection weights of one multi-head attention module.
///
/// The same layout is reused for gradients (see [`MultiHeadSaved::backward`]).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub num_heads: usize,
    pub head_dim: usize,
    pub rope: RopeConfig,
}

impl AttnParams {
    pub fn random(d: usize, num_heads: usize, rope_base: f64, rope_enabled: bool, rng: &mut Rng) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by {num_heads} heads"
            )));
        }
        let head_dim = d / num_heads;
        let rope = RopeConfig {
            base_frequency: rope_base,
            head_dim,
            enabled: rope_enabled,
        };
        rope.validate()?;
        let std = 1.0 / (d as f32).sqrt();
        Ok(Self {
            w_q: Matrix::random_normal(d, d, std, rng),
            w_k: Matrix::random_normal(d, d, std, rng),
            w_v: Matrix::random_normal(d, d, std, rng),
            w_o: Matrix::random_normal(d, d, std, rng),
            num_heads,
            head_dim,
            rope,
        })
    }

    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.d_model();
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != (d, d) {
                return Err(shape_err("AttnParams", format!("{name} is {:?}, expected {d}x{d}", w.shape())));
            }
        }
        self.rope.validate()
    }

    /// Splits `x` into per-head column blocks and applies RoPE at `pos`.
    pub(crate) fn head_block(&self, x: &Matrix, h: usize, pos: &[f64]) -> Result<Matrix> {
        let block = x.column_block(h * self.head_dim, self.head_dim);
        apply_rope(&block, pos, &self.rope)
    }
}

/// Saved forward state of [`multi_head_attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadSaved {
    x: Matrix,
    concat: Matrix,
    heads: Vec<DenseAttention>,
}

impl MultiHeadSaved {
    pub fn heads(&self) -> &[DenseAttention] {
        &self.heads
    }

    /// Returns `d_x` and the weight gradients in [`AttnParams`] layout.
    pub fn backward(&self, p: &AttnParams, d_y: &Matrix) -> Result<(Matrix, AttnParams)> {
        let n = self.x.rows();
        if d_y.shape() != (n, p.d_model()) {
            return Err(Error::StateMismatch(format!(
                "d_y {:?} for multi-head output {:?}",
                d_y.shape(),
                (n, p.d_model())
            )));
        }
        let mut grads = p.zeros_like();
        grads.w_o = self.concat.t_matmul(d_y)?;
        let d_concat = d_y.matmul_t(&p.w_o)?;
        let pos = positions(0..n);
        let d = p.d_model();
        let mut d_qp = Matrix::zeros(n, d);
        let mut d_kp = Matrix::zeros(n, d);
        let mut d_vp = Matrix::zeros(n, d);
        for (h, head) in self.heads.iter().enumerate() {
            let g = head.backward(&d_concat.column_block(h * p.head_dim, p.head_dim))?;
            d_qp.set_column_block(h * p.head_dim, &apply_rope_inverse(&g.d_q, &pos, &p.rope)?);
            d_kp.set_column_block(h * p.head_dim, &apply_rope_inverse(&g.d_k, &pos, &p.rope)?);
            d_vp.set_column_block(h * p.head_dim, &g.d_v);
        }
        grads.w_q = self.x.t_matmul(&d_qp)?;
        grads.w_k = self.x.t_matmul(&d_kp)?;
        grads.w_v = self.x.t_matmul(&d_vp)?;
        let mut d_x = d_qp.matmul_t(&p.w_q)?;
        d_x.add_assign(&d_kp.matmul_t(&p.w_k)?)?;
        d_x.add_assign(&d_vp.matmul_t(&p.w_v)?)?;
        Ok((d_x, grads))
    }
}

/// Project, rotate, attend per head under `mask`, concatenate, and apply `w_o`.
pub fn multi_head_attention(
    x: &Matrix,
    p: &AttnParams,
    mask: CausalMaskSpec,
) -> Result<(Matrix, MultiHeadSaved)> {
    if x.cols() != p.d_model() {
        return Err(shape_err(
            "multi_head_attention",
            format!("input has {} columns, d_model is {}", x.cols(), p.d_model()),
        ));
    }
    let n = x.rows();
    let pos = positions(0..n);
    let q = x.matmul(&p.w_q)?;
    let k = x.matmul(&p.w_k)?;
    let v = x.matmul(&p.w_v)?;
    let mut concat = Matrix::zeros(n, p.d_model());
    let mut heads = Vec::with_capacity(p.num_heads);
    for h in 0..p.num_heads {
        let qh = p.head_block(&q, h, &pos)?;
        let kh = p.head_block(&k, h, &pos)?;
        let vh = v.column_block(h * p.head_dim, p.head_dim);
        let att = dense_causal_attention(&qh, &kh, &vh, mask)?;
        concat.set_column_block(h * p.head_dim, &att.out);
        heads.push(att);
    }
    let y = concat.matmul(&p.w_o)?;
    Ok((
        y,
        MultiHeadSaved {
            x: x.clone(),
            concat,
            heads,
        },
    ))
}

/// Local attention: token `t` attends to positions `max(0, t − window)..=t`.
pub fn sliding_window_attention(x: &Matrix, p: &AttnParams, window: usize) -> Result<Matrix> {
    Ok(multi_head_attention(x, p, CausalMaskSpec::Window(window))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, relative_error};

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (q, k, v) = (rand(1, 4, 1), rand(1, 4, 2), rand(1, 4, 3));
        let a = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Global).unwrap();
        assert_eq!(a.out, v);
        let s00 = dot(q.row(0), k.row(0)) / 2.0;
        assert!((a.lse[0] - s00).abs() < 1e-6);
    }

    #[test]
    fn two_tokens_causal() {
        let (q, k, v) = (rand(2, 4, 4), rand(2, 4, 5), rand(2, 4, 6));
        let a = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Global).unwrap();
        assert_eq!(a.out.row(0), v.row(0));
        let s: Vec<f32> = (0..2).map(|j| dot(q.row(1), k.row(j)) / 2.0).collect();
        let m = s[0].max(s[1]);
        let e: Vec<f32> = s.iter().map(|x| (x - m).exp()).collect();
        let z = e[0] + e[1];
        for c in 0..4 {
            let want = (e[0] * v.get(0, c) + e[1] * v.get(1, c)) / z;
            assert!((a.out.get(1, c) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn window_zero_is_identity_on_values() {
        let (q, k, v) = (rand(6, 4, 7), rand(6, 4, 8), rand(6, 4, 9));
        let a = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Window(0)).unwrap();
        assert_eq!(a.out, v);
    }

    #[test]
    fn weights_rows_are_stochastic() {
        let (q, k, v) = (rand(9, 4, 10), rand(9, 4, 11), rand(9, 4, 12));
        let a = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Window(3)).unwrap();
        let w = a.weights();
        for i in 0..9 {
            let s: f32 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            for j in 0..9 {
                assert!(w.get(i, j) >= 0.0);
                if !CausalMaskSpec::Window(3).allows(i, j) {
                    assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (q, k, v) = (rand(5, 4, 13), rand(5, 4, 14), rand(5, 4, 15));
        let a = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Global).unwrap();
        let g = a.backward(&Matrix::zeros(5, 4)).unwrap();
        assert!(g.d_q.data().iter().chain(g.d_k.data()).chain(g.d_v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_gradients() {
        let (q, k, v) = (rand(1, 4, 16), rand(1, 4, 17), rand(1, 4, 18));
        let a = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Global).unwrap();
        let d = rand(1, 4, 19);
        let g = a.backward(&d).unwrap();
        assert_eq!(g.d_v, d);
        assert!(g.d_q.data().iter().chain(g.d_k.data()).all(|&x| x.abs() < 1e-7));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = 10;
        let (q, k, v) = (rand(n, 4, 20), rand(n, 4, 21), rand(n, 4, 22));
        let probe = rand(n, 4, 23);
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let a = dense_causal_attention(q, k, v, CausalMaskSpec::Global).unwrap();
            a.out.data().iter().zip(probe.data()).map(|(&o, &p)| f64::from(o) * f64::from(p)).sum()
        };
        let g = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Global)
            .unwrap()
            .backward(&probe)
            .unwrap();
        let fq = finite_diff_grad(|m| loss(m, &k, &v), &q, 1e-3);
        let fk = finite_diff_grad(|m| loss(&q, m, &v), &k, 1e-3);
        let fv = finite_diff_grad(|m| loss(&q, &k, m), &v, 1e-3);
        assert!(relative_error(&g.d_q, &fq, 1e-6) <= 1e-3);
        assert!(relative_error(&g.d_k, &fk, 1e-6) <= 1e-3);
        assert!(relative_error(&g.d_v, &fv, 1e-6) <= 1e-3);
    }

    #[test]
    fn wide_window_equals_global() {
        let mut rng = Rng::new(30);
        let p = AttnParams::random(8, 2, 10_000.0, true, &mut rng).unwrap();
        let x = rand(7, 8, 31);
        let local = sliding_window_attention(&x, &p, 6).unwrap();
        let global = multi_head_attention(&x, &p, CausalMaskSpec::Global).unwrap().0;
        assert_eq!(local, global);
    }
}
