//! Compacted-query tiled attention.
//!
//! Active queries are gathered into a contiguous buffer with an index map of
//! their original positions. Attention over key tiles uses an online
//! log-sum-exp so the score matrix is never materialized, and the causal
//! mask is evaluated against the original positions. For each query block
//! only the key tiles up to `⌈(max position + 1) / b_k⌉` are visited. The
//! backward pass recomputes probabilities per tile from the saved row LSE.

use serde::{Deserialize, Serialize};

use crate::attn_ref::dot;
use crate::error::{shape_err, Error, Result};
use crate::numcore::Matrix;

/// Active query rows and their original sequence positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactedQueries {
    pub q_c: Matrix,
    /// Strictly increasing positions into the original sequence.
    pub q_idx: Vec<usize>,
    /// Original sequence length.
    pub n: usize,
}

impl CompactedQueries {
    pub fn len(&self) -> usize {
        self.q_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_idx.is_empty()
    }

    /// Wraps already-compacted rows, checking the index invariants.
    pub fn new(q_c: Matrix, q_idx: Vec<usize>, n: usize) -> Result<Self> {
        if q_c.rows() != q_idx.len() {
            return Err(shape_err(
                "CompactedQueries",
                format!("{} rows for {} indices", q_c.rows(), q_idx.len()),
            ));
        }
        if q_idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("q_idx must be strictly increasing".into()));
        }
        if q_idx.last().is_some_and(|&i| i >= n) {
            return Err(Error::OutOfRange(format!("q_idx exceeds sequence length {n}")));
        }
        Ok(Self { q_c, q_idx, n })
    }
}

/// Gathers the rows of `q` whose decision is set, in original order.
pub fn compact_queries(q: &Matrix, decisions: &[bool]) -> Result<CompactedQueries> {
    if decisions.len() != q.rows() {
        return Err(shape_err(
            "compact_queries",
            format!("{} decisions for {} rows", decisions.len(), q.rows()),
        ));
    }
    let q_idx: Vec<usize> = decisions
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| d.then_some(i))
        .collect();
    let q_c = q.gather_rows(&q_idx)?;
    Ok(CompactedQueries {
        q_c,
        q_idx,
        n: q.rows(),
    })
}

/// Query/key block sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub b_q: usize,
    pub b_k: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { b_q: 16, b_k: 16 }
    }
}

impl TileConfig {
    pub fn new(b_q: usize, b_k: usize) -> Result<Self> {
        let t = Self { b_q, b_k };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_q == 0 || self.b_k == 0 {
            return Err(Error::Config(format!(
                "tile sizes must be >= 1, got b_q={} b_k={}",
                self.b_q, self.b_k
            )));
        }
        Ok(())
    }

    /// Number of key tiles a block whose largest position is `max_pos` visits.
    #[inline]
    pub fn key_tiles_for(&self, max_pos: usize) -> usize {
        (max_pos + 1).div_ceil(self.b_k)
    }
}

/// Work counters collected while running the kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    /// `(query block, key tile)` pairs processed.
    pub key_tile_visits: u64,
    /// Per active query row, key tiles holding at least one admissible key.
    pub row_tile_visits: u64,
    /// Multiply-accumulates over admissible `(query, key)` pairs, counting
    /// both the score and the value product.
    pub macs: u64,
}

impl KernelStats {
    pub fn merge(&mut self, other: &KernelStats) {
        self.key_tile_visits += other.key_tile_visits;
        self.row_tile_visits += other.row_tile_visits;
        self.macs += other.macs;
    }
}

/// Running online-softmax state for one query block.
#[derive(Clone, Debug)]
pub struct TiledAttnWorkspace {
    pub o_acc: Matrix,
    /// Running row max, initially `-inf`.
    pub m_run: Vec<f32>,
    /// Running row sum of `exp(s − m_run)`, initially 0.
    pub l_run: Vec<f32>,
    scores: Vec<f32>,
}

impl TiledAttnWorkspace {
    pub fn new(b_q: usize, head_dim: usize) -> Self {
        Self {
            o_acc: Matrix::zeros(b_q, head_dim),
            m_run: vec![f32::NEG_INFINITY; b_q],
            l_run: vec![0.0; b_q],
            scores: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.o_acc.fill(0.0);
        self.m_run.fill(f32::NEG_INFINITY);
        self.l_run.fill(0.0);
    }

    /// Folds key tile `k_lo..k_hi` into the running state of the block whose
    /// query rows are `q_rows` at original positions `q_pos`.
    pub fn absorb_tile(
        &mut self,
        q_rows: &[&[f32]],
        q_pos: &[usize],
        k: &Matrix,
        v: &Matrix,
        k_lo: usize,
        k_hi: usize,
        scale: f32,
        stats: &mut KernelStats,
    ) {
        let width = k_hi - k_lo;
        let hd = k.cols();
        for (r, (qr, &pos)) in q_rows.iter().zip(q_pos).enumerate() {
            if pos < k_lo {
                // Every score in this row of the tile is masked: m_run and
                // l_run stay as they are.
                continue;
            }
            stats.row_tile_visits += 1;
            let valid_hi = k_hi.min(pos + 1);
            let valid = valid_hi - k_lo;
            stats.macs += (2 * valid * hd) as u64;
            self.scores.clear();
            self.scores.resize(width, f32::NEG_INFINITY);
            let mut tile_max = f32::NEG_INFINITY;
            for j in k_lo..valid_hi {
                let s = dot(qr, k.row(j)) * scale;
                self.scores[j - k_lo] = s;
                tile_max = tile_max.max(s);
            }
            let m_old = self.m_run[r];
            let m_new = m_old.max(tile_max);
            let alpha = if m_old == f32::NEG_INFINITY {
                0.0
            } else {
                (m_old - m_new).exp()
            };
            let orow = self.o_acc.row_mut(r);
            for o in orow.iter_mut() {
                *o *= alpha;
            }
            let mut row_sum = 0.0f32;
            for j in k_lo..valid_hi {
                let p = (self.scores[j - k_lo] - m_new).exp();
                row_sum += p;
                for (o, &vv) in orow.iter_mut().zip(v.row(j)) {
                    *o += p * vv;
                }
            }
            self.l_run[r] = alpha * self.l_run[r] + row_sum;
            self.m_run[r] = m_new;
        }
    }
}

/// Compact outputs and row log-sum-exp of [`sparse_attention_forward`].
#[derive(Clone, Debug)]
pub struct SparseForward {
    pub o_c: Matrix,
    pub lse_c: Vec<f32>,
    pub stats: KernelStats,
}

fn check_kv(cq: &CompactedQueries, k: &Matrix, v: &Matrix) -> Result<()> {
    let hd = cq.q_c.cols();
    if k.rows() != cq.n || v.rows() != cq.n {
        return Err(shape_err(
            "sparse_attention",
            format!("k {:?} / v {:?} for sequence length {}", k.shape(), v.shape(), cq.n),
        ));
    }
    if (k.cols() != hd || v.cols() != hd) && !cq.is_empty() {
        return Err(shape_err(
            "sparse_attention",
            format!("head dims q {hd}, k {}, v {}", k.cols(), v.cols()),
        ));
    }
    Ok(())
}

/// Causal attention for the compacted queries over all keys.
pub fn sparse_attention_forward(
    cq: &CompactedQueries,
    k: &Matrix,
    v: &Matrix,
    tiles: TileConfig,
) -> Result<SparseForward> {
    tiles.validate()?;
    check_kv(cq, k, v)?;
    let n_c = cq.len();
    let hd = v.cols();
    let mut o_c = Matrix::zeros(n_c, hd);
    let mut lse_c = vec![f32::NEG_INFINITY; n_c];
    let mut stats = KernelStats::default();
    if n_c == 0 {
        return Ok(SparseForward { o_c, lse_c, stats });
    }
    let scale = 1.0 / (hd as f32).sqrt();
    let mut ws = TiledAttnWorkspace::new(tiles.b_q, hd);
    for q_lo in (0..n_c).step_by(tiles.b_q) {
        let q_hi = (q_lo + tiles.b_q).min(n_c);
        let q_pos = &cq.q_idx[q_lo..q_hi];
        let q_rows: Vec<&[f32]> = (q_lo..q_hi).map(|i| cq.q_c.row(i)).collect();
        ws.reset();
        // q_idx is increasing, so the last row holds the block maximum.
        let max_tiles = tiles.key_tiles_for(q_pos[q_pos.len() - 1]);
        for t in 0..max_tiles {
            let k_lo = t * tiles.b_k;
            let k_hi = (k_lo + tiles.b_k).min(cq.n);
            stats.key_tile_visits += 1;
            ws.absorb_tile(&q_rows, q_pos, k, v, k_lo, k_hi, scale, &mut stats);
        }
        for r in 0..q_hi - q_lo {
            let l = ws.l_run[r];
            let orow = o_c.row_mut(q_lo + r);
            if l > 0.0 {
                for (o, &a) in orow.iter_mut().zip(ws.o_acc.row(r)) {
                    *o = a / l;
                }
                lse_c[q_lo + r] = ws.m_run[r] + l.ln();
            }
        }
    }
    Ok(SparseForward { o_c, lse_c, stats })
}

/// Places compact rows back at their original positions; all other rows are
/// exactly zero.
pub fn scatter_outputs(o_c: &Matrix, q_idx: &[usize], n: usize) -> Result<Matrix> {
    if o_c.rows() != q_idx.len() {
        return Err(shape_err(
            "scatter_outputs",
            format!("{} rows for {} indices", o_c.rows(), q_idx.len()),
        ));
    }
    let mut out = Matrix::zeros(n, o_c.cols());
    for (i, &pos) in q_idx.iter().enumerate() {
        if pos >= n {
            return Err(Error::OutOfRange(format!("scatter index {pos} >= {n}")));
        }
        out.row_mut(pos).copy_from_slice(o_c.row(i));
    }
    Ok(out)
}

/// Tensors the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct SparseSaved {
    pub cq: CompactedQueries,
    pub k: Matrix,
    pub v: Matrix,
    pub o_c: Matrix,
    pub lse_c: Vec<f32>,
}

impl SparseSaved {
    pub fn new(cq: CompactedQueries, k: Matrix, v: Matrix, fwd: &SparseForward) -> Self {
        Self {
            cq,
            k,
            v,
            o_c: fwd.o_c.clone(),
            lse_c: fwd.lse_c.clone(),
        }
    }
}

/// Gradients of [`sparse_attention_forward`] followed by [`scatter_outputs`].
#[derive(Clone, Debug)]
pub struct SparseGrads {
    /// `[n × head_dim]`, nonzero only at active positions.
    pub d_q_full: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
    pub stats: KernelStats,
}

impl SparseGrads {
    /// Rows of `d_q_full` at the active positions, in compact order.
    pub fn d_q_compact(&self, q_idx: &[usize]) -> Result<Matrix> {
        self.d_q_full.gather_rows(q_idx)
    }
}

/// Backward pass restricted to active queries. `d_o` is the upstream
/// gradient of the scattered `[n × head_dim]` output; rows at inactive
/// positions are ignored.
pub fn sparse_attention_backward(
    saved: &SparseSaved,
    d_o: &Matrix,
    tiles: TileConfig,
) -> Result<SparseGrads> {
    tiles.validate()?;
    let cq = &saved.cq;
    check_kv(cq, &saved.k, &saved.v)?;
    let n = cq.n;
    let hd = saved.v.cols();
    if d_o.shape() != (n, hd) {
        return Err(Error::StateMismatch(format!(
            "d_o {:?}, expected {:?}",
            d_o.shape(),
            (n, hd)
        )));
    }
    if saved.o_c.rows() != cq.len() || saved.lse_c.len() != cq.len() {
        return Err(Error::StateMismatch("saved outputs do not match q_idx".into()));
    }
    let mut d_q_full = Matrix::zeros(n, hd);
    let mut d_k = Matrix::zeros(n, hd);
    let mut d_v = Matrix::zeros(n, hd);
    let mut stats = KernelStats::default();
    let n_c = cq.len();
    if n_c == 0 {
        return Ok(SparseGrads { d_q_full, d_k, d_v, stats });
    }
    let scale = 1.0 / (hd as f32).sqrt();
    let d_o_c = d_o.gather_rows(&cq.q_idx)?;
    // D_i = dO_i · O_i
    let delta: Vec<f32> = (0..n_c)
        .map(|i| dot(d_o_c.row(i), saved.o_c.row(i)))
        .collect();
    let mut d_q_c = Matrix::zeros(n_c, hd);
    for q_lo in (0..n_c).step_by(tiles.b_q) {
        let q_hi = (q_lo + tiles.b_q).min(n_c);
        let max_tiles = tiles.key_tiles_for(cq.q_idx[q_hi - 1]);
        for t in 0..max_tiles {
            let k_lo = t * tiles.b_k;
            let k_hi = (k_lo + tiles.b_k).min(n);
            stats.key_tile_visits += 1;
            for i in q_lo..q_hi {
                let pos = cq.q_idx[i];
                if pos < k_lo {
                    continue;
                }
                stats.row_tile_visits += 1;
                let valid_hi = k_hi.min(pos + 1);
                stats.macs += (4 * (valid_hi - k_lo) * hd) as u64;
                let qi = cq.q_c.row(i);
                let doi = d_o_c.row(i);
                let lse = saved.lse_c[i];
                for j in k_lo..valid_hi {
                    let p = (dot(qi, saved.k.row(j)) * scale - lse).exp();
                    for (dv, &g) in d_v.row_mut(j).iter_mut().zip(doi) {
                        *dv += p * g;
                    }
                    let dp = dot(doi, saved.v.row(j));
                    let ds = p * (dp - delta[i]) * scale;
                    if ds != 0.0 {
                        for (dq, &kv) in d_q_c.row_mut(i).iter_mut().zip(saved.k.row(j)) {
                            *dq += ds * kv;
                        }
                        for (dk, &qv) in d_k.row_mut(j).iter_mut().zip(qi) {
                            *dk += ds * qv;
                        }
                    }
                }
            }
        }
    }
    for (i, &pos) in cq.q_idx.iter().enumerate() {
        d_q_full.row_mut(pos).copy_from_slice(d_q_c.row(i));
    }
    Ok(SparseGrads { d_q_full, d_k, d_v, stats })
}

/// Closed-form key-tile visit count: `Σ_blocks ⌈(max q_idx in block + 1)/b_k⌉`.
pub fn predicted_key_tile_visits(q_idx: &[usize], tiles: TileConfig) -> u64 {
    q_idx
        .chunks(tiles.b_q)
        .map(|block| tiles.key_tiles_for(*block.last().unwrap()) as u64)
        .sum()
}

/// Closed-form per-row tile count: `Σ_active ⌈(pos + 1)/b_k⌉`.
pub fn predicted_row_tile_visits(q_idx: &[usize], tiles: TileConfig) -> u64 {
    q_idx.iter().map(|&p| tiles.key_tiles_for(p) as u64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn_ref::{dense_causal_attention, CausalMaskSpec};
    use crate::numcore::Rng;

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn compaction_cases() {
        let q = rand(4, 3, 1);
        let all = compact_queries(&q, &[true; 4]).unwrap();
        assert_eq!(all.q_c, q);
        assert_eq!(all.q_idx, vec![0, 1, 2, 3]);
        assert!(compact_queries(&q, &[false; 4]).unwrap().is_empty());
        let some = compact_queries(&q, &[false, true, false, true]).unwrap();
        assert_eq!(some.q_idx, vec![1, 3]);
        assert_eq!(some.q_c.row(0), q.row(1));
        assert_eq!(some.q_c.row(1), q.row(3));
        assert!(compact_queries(&q, &[true; 3]).is_err());
    }

    #[test]
    fn scatter_cases() {
        let o = rand(1, 3, 2);
        let s = scatter_outputs(&o, &[2], 4).unwrap();
        for r in [0, 1, 3] {
            assert!(s.row(r).iter().all(|&x| x == 0.0));
        }
        assert_eq!(s.row(2), o.row(0));
        assert!(scatter_outputs(&Matrix::zeros(0, 3), &[], 4)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(scatter_outputs(&o, &[4], 4).is_err());
    }

    #[test]
    fn dense_case_matches_oracle() {
        let n = 11;
        let (q, k, v) = (rand(n, 4, 3), rand(n, 4, 4), rand(n, 4, 5));
        let oracle = dense_causal_attention(&q, &k, &v, CausalMaskSpec::Global).unwrap();
        for (bq, bk) in [(1, 1), (3, 5), (4, 4), (16, 2)] {
            let cq = compact_queries(&q, &vec![true; n]).unwrap();
            let f = sparse_attention_forward(&cq, &k, &v, TileConfig::new(bq, bk).unwrap()).unwrap();
            assert!(f.o_c.max_abs_diff(&oracle.out) <= 1e-5);
            for i in 0..n {
                assert!((f.lse_c[i] - oracle.lse[i]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn first_position_returns_first_value() {
        let (q, k, v) = (rand(5, 4, 6), rand(5, 4, 7), rand(5, 4, 8));
        let cq = compact_queries(&q, &[true, false, false, false, false]).unwrap();
        let f = sparse_attention_forward(&cq, &k, &v, TileConfig::new(2, 2).unwrap()).unwrap();
        assert_eq!(f.o_c.row(0), v.row(0));
    }

    #[test]
    fn early_termination_visits() {
        let (q, k, v) = (rand(8, 4, 9), rand(8, 4, 10), rand(8, 4, 11));
        let mut d = [false; 8];
        d[3] = true;
        let cq = compact_queries(&q, &d).unwrap();
        let tiles = TileConfig::new(4, 2).unwrap();
        let f = sparse_attention_forward(&cq, &k, &v, tiles).unwrap();
        assert_eq!(f.stats.key_tile_visits, 2);
        assert_eq!(predicted_key_tile_visits(&cq.q_idx, tiles), 2);
    }

    #[test]
    fn empty_selection_is_empty_output() {
        let (k, v) = (rand(6, 4, 12), rand(6, 4, 13));
        let cq = CompactedQueries::new(Matrix::zeros(0, 4), vec![], 6).unwrap();
        let f = sparse_attention_forward(&cq, &k, &v, TileConfig::default()).unwrap();
        assert_eq!(f.o_c.rows(), 0);
        assert_eq!(f.stats, KernelStats::default());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let n = 7;
        let (q, k, v) = (rand(n, 4, 14), rand(n, 4, 15), rand(n, 4, 16));
        let cq = compact_queries(&q, &[true, false, true, true, false, false, true]).unwrap();
        let tiles = TileConfig::new(2, 3).unwrap();
        let f = sparse_attention_forward(&cq, &k, &v, tiles).unwrap();
        let saved = SparseSaved::new(cq, k, v, &f);
        let g = sparse_attention_backward(&saved, &Matrix::zeros(n, 4), tiles).unwrap();
        for m in [&g.d_q_full, &g.d_k, &g.d_v] {
            assert!(m.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn compacted_index_invariants() {
        assert!(CompactedQueries::new(Matrix::zeros(2, 2), vec![1, 1], 4).is_err());
        assert!(CompactedQueries::new(Matrix::zeros(1, 2), vec![4], 4).is_err());
        assert!(TileConfig::new(0, 1).is_err());
    }
}
