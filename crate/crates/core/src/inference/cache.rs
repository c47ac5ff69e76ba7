//! Prefill and token-by-token decode with explicit KV storage.
//!
//! Local attention keeps a ring of the last `window + 1` entries per head.
//! Global attention keeps every position, including tokens that skipped it:
//! later routed tokens may still attend to them.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attn_ref::dot;
use crate::error::{shape_err, Error, Result};
use crate::kernel::TileConfig;
use crate::layer::{ffn_forward, model_forward, ForwardOptions, L2ALayer, LayerTrace, RouterInput, ToyModel};
use crate::numcore::{apply_rope, layer_norm, Matrix};
use crate::router::route;

/// Post-RoPE keys and values of one head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadKv {
    pub keys: VecDeque<Vec<f32>>,
    pub values: VecDeque<Vec<f32>>,
}

impl HeadKv {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn push(&mut self, k: Vec<f32>, v: Vec<f32>, cap: Option<usize>) {
        self.keys.push_back(k);
        self.values.push_back(v);
        if let Some(cap) = cap {
            while self.keys.len() > cap {
                self.keys.pop_front();
                self.values.pop_front();
            }
        }
    }

    fn from_rows(k: &Matrix, v: &Matrix, from: usize) -> Self {
        Self {
            keys: (from..k.rows()).map(|r| k.row(r).to_vec()).collect(),
            values: (from..v.rows()).map(|r| v.row(r).to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub local: Vec<HeadKv>,
    /// `None` for pruned layers.
    pub global: Option<Vec<HeadKv>>,
}

impl LayerCache {
    pub fn local_entries(&self) -> usize {
        self.local.first().map_or(0, HeadKv::len)
    }

    pub fn global_entries(&self) -> usize {
        self.global.as_ref().and_then(|g| g.first()).map_or(0, HeadKv::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Number of tokens consumed so far (the next token's position).
    pub position: usize,
    pub threshold_override: Option<f32>,
    /// Ablation: do not store global KV for tokens that skipped global
    /// attention. Changes what later tokens can see.
    pub drop_skipped_global_kv: bool,
    layer_windows: Vec<usize>,
}

/// Per-layer record of one decode step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeLayerTrace {
    /// `None` for pruned layers.
    pub score: Option<f32>,
    pub decision: Option<bool>,
    /// Multiply-accumulates spent on global attention this step.
    pub global_macs: u64,
}

#[derive(Clone, Debug)]
pub struct Prefill {
    /// `[n × vocab]` logits of every prompt position.
    pub logits: Matrix,
    pub cache: KvCache,
    pub traces: Vec<LayerTrace>,
}

impl Prefill {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Runs the eval-mode forward over the prompt and keeps its KV state.
pub fn prefill(model: &ToyModel, tokens: &[usize], threshold_override: Option<f32>, tiles: TileConfig) -> Result<Prefill> {
    let opts = ForwardOptions::eval().with_threshold(threshold_override).with_tiles(tiles);
    let f = model_forward(tokens, model, &opts)?;
    let n = tokens.len();
    let mut layers = Vec::with_capacity(model.num_layers());
    for (saved, block) in f.saved.layers().iter().zip(&model.blocks) {
        let heads = block.l2a.local.num_heads;
        let from = n.saturating_sub(local_capacity(&block.l2a));
        let local = (0..heads)
            .map(|h| {
                let (k, v) = saved.local_kv(h);
                HeadKv::from_rows(k, v, from)
            })
            .collect();
        let global = if block.l2a.is_pruned() {
            None
        } else {
            Some(
                (0..heads)
                    .map(|h| {
                        let (k, v) = saved.global_kv(h).expect("unpruned layer saves global KV");
                        HeadKv::from_rows(k, v, 0)
                    })
                    .collect(),
            )
        };
        layers.push(LayerCache { local, global });
    }
    Ok(Prefill {
        logits: f.logits,
        cache: KvCache {
            layers,
            position: n,
            threshold_override,
            drop_skipped_global_kv: false,
            layer_windows: model.blocks.iter().map(|b| b.l2a.window).collect(),
        },
        traces: f.traces,
    })
}

fn local_capacity(layer: &L2ALayer) -> usize {
    layer.window.saturating_add(1)
}

/// Softmax attention of one query row over cached entries.
fn attend(q: &[f32], kv: &HeadKv, scale: f32) -> Vec<f32> {
    let scores: Vec<f32> = kv.keys.iter().map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f32> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f32 = weights.iter().sum();
    let mut out = vec![0.0f32; q.len()];
    for (w, v) in weights.iter().zip(&kv.values) {
        let p = w / sum;
        for (o, &x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    out
}

/// Projects one row through a head's slice of `w` and rotates it to `pos`.
fn head_row(row: &Matrix, w: &Matrix, h: usize, hd: usize, pos: f64, rope: &crate::numcore::RopeConfig) -> Result<Vec<f32>> {
    let full = row.matmul(w)?;
    Ok(apply_rope(&full.column_block(h * hd, hd), &[pos], rope)?.into_vec())
}

/// Feeds one token through the model against `cache`, appending its KV
/// entries. Returns the next-token logits.
pub fn decode_step(model: &ToyModel, cache: &mut KvCache, token: usize) -> Result<(Vec<f32>, Vec<DecodeLayerTrace>)> {
    if cache.layers.len() != model.num_layers() {
        return Err(Error::StateMismatch(format!(
            "cache has {} layers, model {}",
            cache.layers.len(),
            model.num_layers()
        )));
    }
    let windows: Vec<usize> = model.blocks.iter().map(|b| b.l2a.window).collect();
    if windows != cache.layer_windows {
        return Err(Error::StateMismatch("window sizes changed since prefill".into()));
    }
    for (lc, b) in cache.layers.iter().zip(&model.blocks) {
        if lc.global.is_some() == b.l2a.is_pruned() {
            return Err(Error::StateMismatch("pruned layers changed since prefill".into()));
        }
    }
    if token >= model.config.vocab {
        return Err(Error::OutOfRange(format!("token {token} >= vocab {}", model.config.vocab)));
    }
    let pos = cache.position as f64;
    let mut x = model.embed.gather_rows(&[token])?;
    let mut traces = Vec::with_capacity(model.num_layers());
    for (block, lc) in model.blocks.iter().zip(cache.layers.iter_mut()) {
        let layer = &block.l2a;
        let attn = &layer.local;
        let hd = attn.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let d = attn.d_model();

        let mut concat = vec![0.0f32; d];
        for h in 0..attn.num_heads {
            let k = head_row(&x, &attn.w_k, h, hd, pos, &attn.rope)?;
            let v = x.matmul(&attn.w_v)?.column_block(h * hd, hd).into_vec();
            lc.local[h].push(k, v, Some(local_capacity(layer)));
            let q = head_row(&x, &attn.w_q, h, hd, pos, &attn.rope)?;
            concat[h * hd..(h + 1) * hd].copy_from_slice(&attend(&q, &lc.local[h], scale));
        }
        let y = Matrix::row_vector(&concat).matmul(&attn.w_o)?;
        let (s_ln, _) = layer_norm(&y, layer.ln_local.gamma.row(0), layer.ln_local.beta.row(0), layer.ln_local.eps)?;
        let mut s = x.clone();
        s.add_assign(&s_ln)?;

        let mut out = s.clone();
        let trace = match (&layer.global, lc.global.as_mut()) {
            (Some(g), Some(gkv)) => {
                let threshold = cache.threshold_override.unwrap_or(layer.threshold);
                let router_in = match layer.router_input {
                    RouterInput::Residual => &s,
                    RouterInput::LocalNorm => &s_ln,
                };
                let state = route(router_in, &layer.router, threshold)?;
                let active = state.decisions[0];
                let ga = &g.attn;
                if active || !cache.drop_skipped_global_kv {
                    for (h, head) in gkv.iter_mut().enumerate() {
                        let k = head_row(&s, &ga.w_k, h, hd, pos, &ga.rope)?;
                        let v = s.matmul(&ga.w_v)?.column_block(h * hd, hd).into_vec();
                        head.push(k, v, None);
                    }
                }
                let mut macs = 0u64;
                if active {
                    let mut gcat = vec![0.0f32; d];
                    for (h, head) in gkv.iter().enumerate() {
                        let q = head_row(&s, &ga.w_q, h, hd, pos, &ga.rope)?;
                        gcat[h * hd..(h + 1) * hd].copy_from_slice(&attend(&q, head, scale));
                        macs += 2 * (head.len() * hd) as u64;
                    }
                    let gy = Matrix::row_vector(&gcat).matmul(&ga.w_o)?;
                    let (a, _) = layer_norm(&gy, g.ln.gamma.row(0), g.ln.beta.row(0), g.ln.eps)?;
                    out.add_assign(&a)?;
                }
                DecodeLayerTrace {
                    score: Some(state.scores[0]),
                    decision: Some(active),
                    global_macs: macs,
                }
            }
            (None, None) => DecodeLayerTrace {
                score: None,
                decision: None,
                global_macs: 0,
            },
            _ => return Err(Error::StateMismatch("cache and model disagree on pruning".into())),
        };
        traces.push(trace);
        x = ffn_forward(&out, &block.ffn)?.0;
    }
    let logits = x.matmul(&model.unembed)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite decode logits".into()));
    }
    cache.position += 1;
    Ok((logits.into_vec(), traces))
}

/// Prefills `tokens[..prompt_len]` and decodes the rest one at a time.
/// Returns logits for every position, comparable to a full forward.
pub fn prefill_then_decode(model: &ToyModel, tokens: &[usize], prompt_len: usize, tiles: TileConfig) -> Result<Matrix> {
    if prompt_len == 0 || prompt_len > tokens.len() {
        return Err(shape_err("prefill_then_decode", format!("prompt length {prompt_len} for {} tokens", tokens.len())));
    }
    let mut p = prefill(model, &tokens[..prompt_len], None, tiles)?;
    let vocab = model.config.vocab;
    let mut data = p.logits.data().to_vec();
    for &t in &tokens[prompt_len..] {
        let (logits, _) = decode_step(model, &mut p.cache, t)?;
        data.extend_from_slice(&logits);
    }
    Matrix::from_vec(tokens.len(), vocab, data)
}
