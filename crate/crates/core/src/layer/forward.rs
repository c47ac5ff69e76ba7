//! Forward and backward passes of the conditional-attention decoder.
//!
//! Per block:
//!
//! ```text
//! s   = x + LN_local(SWA(x))
//! d̂   = σ(w · s),  d = [d̂ ≥ threshold]
//! a   = LN_global(W_o · GlobalAttn(q = s_t, k/v = s_{≤t}))   for routed t
//! o_t = s_t + a_t · d_t
//! h   = o + FFN(o)
//! ```
//!
//! The norm arrangement (post-attention norm inside each branch, residual
//! around the local branch) is fixed in [`NORM_PLACEMENT`].

use crate::attn_ref::{dot, multi_head_attention, AttnParams, CausalMaskSpec, MultiHeadSaved};
use crate::error::{shape_err, Error, Result};
use crate::kernel::{
    scatter_outputs, sparse_attention_backward, sparse_attention_forward, CompactedQueries,
    KernelStats, SparseSaved, TileConfig,
};
use crate::layer::params::{FeedForward, L2ALayer, RouterInput, ToyModel};
use crate::numcore::{
    apply_rope, apply_rope_inverse, gelu, gelu_grad, layer_norm, layer_norm_backward, positions,
    LayerNormCache, Matrix, Rng,
};
use crate::router::{effective_decisions, route, router_backward_ste, RoutingState};

/// Sub-layer norm arrangement used by every block.
pub const NORM_PLACEMENT: &str = "s = x + LN(SWA(x)); o = s + d * LN(GlobalAttn(s)); h = o + FFN(o)";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How per-token routing decisions are obtained.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum RoutingOverride {
    /// The router decides.
    #[default]
    Learned,
    /// Every token uses global attention.
    AllOnes,
    /// Decisions given per layer.
    Fixed(Vec<Vec<bool>>),
    /// Context-free control: each token routes independently with
    /// probability `p`, drawn from a stream seeded by `seed`.
    Bernoulli { p: f64, seed: u64 },
    /// Decisions frozen at `decisions`, output gate `d_t + (d̂_t − anchor_t)`.
    /// Equal to the regular forward at the anchor point while making the
    /// straight-through gradient the exact derivative, so it can be checked
    /// by finite differences.
    StraightThroughProbe {
        decisions: Vec<Vec<bool>>,
        anchors: Vec<Vec<f32>>,
    },
}

impl RoutingOverride {
    /// Override for the `index`-th sequence of a batch. Bernoulli masks get
    /// an independent stream per sequence; every other variant is shared.
    pub fn for_sequence(&self, index: u64) -> Self {
        match self {
            Self::Bernoulli { p, seed } => Self::Bernoulli {
                p: *p,
                seed: Rng::new(*seed).derive(&[index]).next_u64(),
            },
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Per-layer forced-global flags for this step; ignored in eval mode.
    pub forced: Vec<bool>,
    pub routing: RoutingOverride,
    pub threshold_override: Option<f32>,
    pub tiles: TileConfig,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self::eval()
    }
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            forced: Vec::new(),
            routing: RoutingOverride::Learned,
            threshold_override: None,
            tiles: TileConfig::default(),
        }
    }

    pub fn train(forced: Vec<bool>) -> Self {
        Self {
            mode: Mode::Train,
            forced,
            ..Self::eval()
        }
    }

    pub fn with_routing(mut self, routing: RoutingOverride) -> Self {
        self.routing = routing;
        self
    }

    pub fn with_threshold(mut self, threshold: Option<f32>) -> Self {
        self.threshold_override = threshold;
        self
    }

    pub fn with_tiles(mut self, tiles: TileConfig) -> Self {
        self.tiles = tiles;
        self
    }
}

/// Routing source for a single layer call.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerRouting {
    Learned,
    Fixed(Vec<bool>),
    Probe { decisions: Vec<bool>, anchors: Vec<f32> },
}

#[derive(Clone, Debug)]
pub struct LayerOptions {
    pub mode: Mode,
    pub forced: bool,
    pub routing: LayerRouting,
    pub threshold: f32,
    pub tiles: TileConfig,
}

/// What one layer did on one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `None` for pruned layers.
    pub routing: Option<RoutingState>,
    /// Fraction of tokens with `d_t = 0`.
    pub sparsity: f64,
    pub kernel: KernelStats,
}

#[derive(Clone, Debug)]
struct GlobalSaved {
    idx: Vec<usize>,
    s_c: Matrix,
    heads: Vec<SparseSaved>,
    concat_c: Matrix,
    ln_cache: LayerNormCache,
    a_c: Matrix,
}

/// Saved forward state of one layer.
#[derive(Clone, Debug)]
pub struct LayerSaved {
    local: MultiHeadSaved,
    ln_local_cache: LayerNormCache,
    s_ln: Matrix,
    s: Matrix,
    routing: Option<RoutingState>,
    /// Output multiplier applied to `a_t` (the decision, or the probe gate).
    gate: Vec<f32>,
    learned: bool,
    global: Option<GlobalSaved>,
}

impl LayerSaved {
    /// The local-context representation `s` the router scores.
    pub fn s(&self) -> &Matrix {
        &self.s
    }

    pub fn router_input(&self, layer: &L2ALayer) -> &Matrix {
        match layer.router_input {
            RouterInput::Residual => &self.s,
            RouterInput::LocalNorm => &self.s_ln,
        }
    }

    pub fn routing(&self) -> Option<&RoutingState> {
        self.routing.as_ref()
    }

    /// Global attention output `a_t` for every position (zero rows where it
    /// was not computed).
    pub fn global_output(&self) -> Matrix {
        let n = self.s.rows();
        match &self.global {
            Some(g) => scatter_outputs(&g.a_c, &g.idx, n).expect("indices were validated"),
            None => Matrix::zeros(n, self.s.cols()),
        }
    }

    /// Per-head post-RoPE `(keys, values)` of local attention.
    pub fn local_kv(&self, head: usize) -> (&Matrix, &Matrix) {
        let h = &self.local.heads()[head];
        (h.keys(), h.values())
    }

    /// Per-head post-RoPE `(keys, values)` of global attention.
    pub fn global_kv(&self, head: usize) -> Option<(&Matrix, &Matrix)> {
        self.global.as_ref().map(|g| (&g.heads[head].k, &g.heads[head].v))
    }
}

fn rows_of(m: &Matrix, r: usize) -> &[f32] {
    m.row(r)
}

/// One conditional-attention layer. Pruned layers return `s` unchanged
/// with sparsity 1.
pub fn l2a_layer_forward(
    x: &Matrix,
    layer: &L2ALayer,
    opts: &LayerOptions,
) -> Result<(Matrix, LayerTrace, LayerSaved)> {
    let n = x.rows();
    let d = layer.local.d_model();
    if x.cols() != d {
        return Err(shape_err(
            "l2a_layer_forward",
            format!("input has {} columns, layer expects {d}", x.cols()),
        ));
    }
    let (y, local) = multi_head_attention(x, &layer.local, CausalMaskSpec::Window(layer.window))?;
    let (s_ln, ln_local_cache) = layer_norm(
        &y,
        layer.ln_local.gamma.row(0),
        layer.ln_local.beta.row(0),
        layer.ln_local.eps,
    )?;
    let mut s = x.clone();
    s.add_assign(&s_ln)?;

    let Some(global) = &layer.global else {
        let trace = LayerTrace {
            routing: None,
            sparsity: 1.0,
            kernel: KernelStats::default(),
        };
        let saved = LayerSaved {
            local,
            ln_local_cache,
            s_ln,
            s: s.clone(),
            routing: None,
            gate: vec![0.0; n],
            learned: false,
            global: None,
        };
        return Ok((s, trace, saved));
    };

    let router_in = match layer.router_input {
        RouterInput::Residual => &s,
        RouterInput::LocalNorm => &s_ln,
    };
    let mut state = route(router_in, &layer.router, opts.threshold)?;
    state.forced_global = opts.mode == Mode::Train && opts.forced;
    let (gate, learned) = match &opts.routing {
        LayerRouting::Learned => (
            state.decisions.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f32>>(),
            true,
        ),
        LayerRouting::Fixed(dec) => {
            check_len("fixed decisions", dec.len(), n)?;
            state.decisions = dec.clone();
            (dec.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), false)
        }
        LayerRouting::Probe { decisions, anchors } => {
            check_len("probe decisions", decisions.len(), n)?;
            check_len("probe anchors", anchors.len(), n)?;
            state.decisions = decisions.clone();
            let gate = (0..n)
                .map(|t| {
                    let base = if decisions[t] { 1.0 } else { 0.0 };
                    base + (state.scores[t] - anchors[t])
                })
                .collect();
            (gate, true)
        }
    };
    let (mut compute, _output) = effective_decisions(&state);
    if matches!(opts.routing, LayerRouting::Probe { .. }) {
        // The probe gate is nonzero away from its anchor for every token.
        compute = vec![true; n];
    }
    let idx: Vec<usize> = compute
        .iter()
        .enumerate()
        .filter_map(|(t, &c)| c.then_some(t))
        .collect();

    let attn = &global.attn;
    let hd = attn.head_dim;
    let k = s.matmul(&attn.w_k)?;
    let v = s.matmul(&attn.w_v)?;
    let s_c = s.gather_rows(&idx)?;
    let q_c = s_c.matmul(&attn.w_q)?;
    let all_pos = positions(0..n);
    let q_pos: Vec<f64> = idx.iter().map(|&t| t as f64).collect();
    let mut concat_c = Matrix::zeros(idx.len(), d);
    let mut heads = Vec::with_capacity(attn.num_heads);
    let mut kernel = KernelStats::default();
    for h in 0..attn.num_heads {
        let qh = apply_rope(&q_c.column_block(h * hd, hd), &q_pos, &attn.rope)?;
        let kh = attn.head_block(&k, h, &all_pos)?;
        let vh = v.column_block(h * hd, hd);
        let cq = CompactedQueries::new(qh, idx.clone(), n)?;
        let fwd = sparse_attention_forward(&cq, &kh, &vh, opts.tiles)?;
        kernel.merge(&fwd.stats);
        concat_c.set_column_block(h * hd, &fwd.o_c);
        heads.push(SparseSaved::new(cq, kh, vh, &fwd));
    }
    let y_c = concat_c.matmul(&attn.w_o)?;
    let (a_c, ln_cache) = layer_norm(&y_c, global.ln.gamma.row(0), global.ln.beta.row(0), global.ln.eps)?;

    let mut out = s.clone();
    for (i, &t) in idx.iter().enumerate() {
        let g = gate[t];
        if g != 0.0 {
            for (o, &a) in out.row_mut(t).iter_mut().zip(rows_of(&a_c, i)) {
                *o += g * a;
            }
        }
    }
    let trace = LayerTrace {
        sparsity: state.sparsity(),
        routing: Some(state.clone()),
        kernel,
    };
    let saved = LayerSaved {
        local,
        ln_local_cache,
        s_ln,
        s,
        routing: Some(state),
        gate,
        learned,
        global: Some(GlobalSaved {
            idx,
            s_c,
            heads,
            concat_c,
            ln_cache,
            a_c,
        }),
    };
    Ok((out, trace, saved))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(shape_err("l2a_layer_forward", format!("{what}: {got} entries for {want} tokens")));
    }
    Ok(())
}

/// Result of [`l2a_layer_backward`].
#[derive(Clone, Debug)]
pub struct LayerBackward {
    pub d_x: Matrix,
    /// Next-token-loss part of `∂L/∂d̂_t`, i.e. `(∂L/∂o_t)ᵀ a_t`.
    pub d_dhat_ntp: Vec<f32>,
}

/// Backward pass of one layer. Gradients are accumulated into `grads`
/// (same layout as `layer`). `d_dhat_extra` is added to the router score
/// gradient, e.g. the sparsity regularizer.
pub fn l2a_layer_backward(
    layer: &L2ALayer,
    saved: &LayerSaved,
    d_out: &Matrix,
    d_dhat_extra: Option<&[f32]>,
    tiles: TileConfig,
    grads: &mut L2ALayer,
) -> Result<LayerBackward> {
    let n = saved.s.rows();
    let d = saved.s.cols();
    if d_out.shape() != (n, d) {
        return Err(Error::StateMismatch(format!(
            "d_out {:?} for layer output {:?}",
            d_out.shape(),
            (n, d)
        )));
    }
    if layer.is_pruned() != saved.global.is_none() {
        return Err(Error::StateMismatch("pruned flag changed since forward".into()));
    }
    let mut d_s = d_out.clone();
    let mut d_dhat = vec![0.0f32; n];

    if let (Some(global), Some(gs), Some(gg)) = (&layer.global, &saved.global, grads.global.as_mut()) {
        let attn = &global.attn;
        let hd = attn.head_dim;
        let n_c = gs.idx.len();
        let mut d_a_c = Matrix::zeros(n_c, d);
        for (i, &t) in gs.idx.iter().enumerate() {
            let up = d_out.row(t);
            if saved.learned {
                d_dhat[t] = dot(up, gs.a_c.row(i));
            }
            let g = saved.gate[t];
            if g != 0.0 {
                for (da, &u) in d_a_c.row_mut(i).iter_mut().zip(up) {
                    *da = g * u;
                }
            }
        }
        let (d_y_c, dgam, dbet) = layer_norm_backward(&gs.ln_cache, global.ln.gamma.row(0), &d_a_c)?;
        add_row(&mut gg.ln.gamma, &dgam);
        add_row(&mut gg.ln.beta, &dbet);
        gg.attn.w_o.add_assign(&gs.concat_c.t_matmul(&d_y_c)?)?;
        let d_concat_c = d_y_c.matmul_t(&attn.w_o)?;
        let q_pos: Vec<f64> = gs.idx.iter().map(|&t| t as f64).collect();
        let all_pos = positions(0..n);
        let mut d_q_c = Matrix::zeros(n_c, d);
        let mut d_k = Matrix::zeros(n, d);
        let mut d_v = Matrix::zeros(n, d);
        for (h, hs) in gs.heads.iter().enumerate() {
            let d_o = scatter_outputs(&d_concat_c.column_block(h * hd, hd), &gs.idx, n)?;
            let g = sparse_attention_backward(hs, &d_o, tiles)?;
            let dq = apply_rope_inverse(&g.d_q_compact(&gs.idx)?, &q_pos, &attn.rope)?;
            d_q_c.set_column_block(h * hd, &dq);
            d_k.set_column_block(h * hd, &apply_rope_inverse(&g.d_k, &all_pos, &attn.rope)?);
            d_v.set_column_block(h * hd, &g.d_v);
        }
        gg.attn.w_q.add_assign(&gs.s_c.t_matmul(&d_q_c)?)?;
        gg.attn.w_k.add_assign(&saved.s.t_matmul(&d_k)?)?;
        gg.attn.w_v.add_assign(&saved.s.t_matmul(&d_v)?)?;
        d_s.scatter_add_rows(&gs.idx, &d_q_c.matmul_t(&attn.w_q)?)?;
        d_s.add_assign(&d_k.matmul_t(&attn.w_k)?)?;
        d_s.add_assign(&d_v.matmul_t(&attn.w_v)?)?;
    }

    let d_dhat_ntp = d_dhat.clone();
    let mut d_s_ln_extra = None;
    if let Some(state) = &saved.routing {
        if let Some(extra) = d_dhat_extra {
            if extra.len() != n {
                return Err(Error::StateMismatch(format!(
                    "{} regularizer gradients for {n} tokens",
                    extra.len()
                )));
            }
            for (a, &b) in d_dhat.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let (d_w, d_in) = router_backward_ste(saved.router_input(layer), &layer.router, state, &d_dhat)?;
        grads.router.w.add_assign(&d_w)?;
        match layer.router_input {
            RouterInput::Residual => d_s.add_assign(&d_in)?,
            RouterInput::LocalNorm => d_s_ln_extra = Some(d_in),
        }
    }

    let mut d_s_ln = d_s.clone();
    if let Some(extra) = d_s_ln_extra {
        d_s_ln.add_assign(&extra)?;
    }
    let (d_y, dgam, dbet) =
        layer_norm_backward(&saved.ln_local_cache, layer.ln_local.gamma.row(0), &d_s_ln)?;
    add_row(&mut grads.ln_local.gamma, &dgam);
    add_row(&mut grads.ln_local.beta, &dbet);
    let (d_x_local, local_grads) = saved.local.backward(&layer.local, &d_y)?;
    add_attn(&mut grads.local, &local_grads)?;
    let mut d_x = d_s;
    d_x.add_assign(&d_x_local)?;
    Ok(LayerBackward { d_x, d_dhat_ntp })
}

fn add_row(m: &mut Matrix, v: &[f32]) {
    for (a, &b) in m.row_mut(0).iter_mut().zip(v) {
        *a += b;
    }
}

fn add_attn(acc: &mut AttnParams, g: &AttnParams) -> Result<()> {
    acc.w_q.add_assign(&g.w_q)?;
    acc.w_k.add_assign(&g.w_k)?;
    acc.w_v.add_assign(&g.w_v)?;
    acc.w_o.add_assign(&g.w_o)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub(crate) struct FfnSaved {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

pub(crate) fn ffn_forward(x: &Matrix, f: &FeedForward) -> Result<(Matrix, FfnSaved)> {
    let mut pre = x.matmul(&f.w1)?;
    for r in 0..pre.rows() {
        for (p, &b) in pre.row_mut(r).iter_mut().zip(f.b1.row(0)) {
            *p += b;
        }
    }
    let mut act = pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let mut out = act.matmul(&f.w2)?;
    for r in 0..out.rows() {
        for ((o, &b), &xi) in out.row_mut(r).iter_mut().zip(f.b2.row(0)).zip(x.row(r)) {
            *o += b + xi;
        }
    }
    Ok((out, FfnSaved { input: x.clone(), pre, act }))
}

fn ffn_backward(f: &FeedForward, saved: &FfnSaved, d_out: &Matrix, grads: &mut FeedForward) -> Result<Matrix> {
    grads.w2.add_assign(&saved.act.t_matmul(d_out)?)?;
    for r in 0..d_out.rows() {
        add_row(&mut grads.b2, d_out.row(r));
    }
    let mut d_pre = d_out.matmul_t(&f.w2)?;
    for (g, &p) in d_pre.data_mut().iter_mut().zip(saved.pre.data()) {
        *g *= gelu_grad(p);
    }
    grads.w1.add_assign(&saved.input.t_matmul(&d_pre)?)?;
    for r in 0..d_pre.rows() {
        add_row(&mut grads.b1, d_pre.row(r));
    }
    let mut d_x = d_pre.matmul_t(&f.w1)?;
    d_x.add_assign(d_out)?;
    Ok(d_x)
}

/// Saved forward state of [`model_forward`].
#[derive(Clone, Debug)]
pub struct ModelSaved {
    tokens: Vec<usize>,
    layers: Vec<LayerSaved>,
    ffn: Vec<FfnSaved>,
    final_hidden: Matrix,
    tiles: TileConfig,
}

impl ModelSaved {
    pub fn layers(&self) -> &[LayerSaved] {
        &self.layers
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

#[derive(Clone, Debug)]
pub struct ModelForward {
    /// `[n × vocab]`.
    pub logits: Matrix,
    pub traces: Vec<LayerTrace>,
    pub saved: ModelSaved,
}

fn layer_routing(routing: &RoutingOverride, layer: usize, n: usize) -> Result<LayerRouting> {
    Ok(match routing {
        RoutingOverride::Learned => LayerRouting::Learned,
        RoutingOverride::AllOnes => LayerRouting::Fixed(vec![true; n]),
        RoutingOverride::Fixed(per_layer) => LayerRouting::Fixed(
            per_layer
                .get(layer)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no fixed decisions for layer {layer}")))?,
        ),
        RoutingOverride::Bernoulli { p, seed } => {
            let mut rng = Rng::new(*seed).split(layer as u64);
            LayerRouting::Fixed((0..n).map(|_| rng.bernoulli(*p)).collect())
        }
        RoutingOverride::StraightThroughProbe { decisions, anchors } => {
            let missing = || Error::Config(format!("no probe state for layer {layer}"));
            LayerRouting::Probe {
                decisions: decisions.get(layer).cloned().ok_or_else(missing)?,
                anchors: anchors.get(layer).cloned().ok_or_else(missing)?,
            }
        }
    })
}

/// Embed → blocks → output head.
pub fn model_forward(tokens: &[usize], model: &ToyModel, opts: &ForwardOptions) -> Result<ModelForward> {
    let vocab = model.config.vocab;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::OutOfRange(format!("token {bad} >= vocab {vocab}")));
    }
    if tokens.is_empty() {
        return Err(shape_err("model_forward", "empty token sequence"));
    }
    let n = tokens.len();
    let mut h = model.embed.gather_rows(tokens)?;
    let mut traces = Vec::with_capacity(model.num_layers());
    let mut layers = Vec::with_capacity(model.num_layers());
    let mut ffn = Vec::with_capacity(model.num_layers());
    for (l, block) in model.blocks.iter().enumerate() {
        let lopts = LayerOptions {
            mode: opts.mode,
            forced: opts.mode == Mode::Train && opts.forced.get(l).copied().unwrap_or(false),
            routing: layer_routing(&opts.routing, l, n)?,
            threshold: opts.threshold_override.unwrap_or(block.l2a.threshold),
            tiles: opts.tiles,
        };
        let (o, trace, saved) = l2a_layer_forward(&h, &block.l2a, &lopts)?;
        let (next, fs) = ffn_forward(&o, &block.ffn)?;
        traces.push(trace);
        layers.push(saved);
        ffn.push(fs);
        h = next;
    }
    let logits = h.matmul(&model.unembed)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ModelForward {
        logits,
        traces,
        saved: ModelSaved {
            tokens: tokens.to_vec(),
            layers,
            ffn,
            final_hidden: h,
            tiles: opts.tiles,
        },
    })
}

/// Gradients of every parameter, stored in the model's own layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: ToyModel,
}

impl ParamGrads {
    pub fn zeros(model: &ToyModel) -> Self {
        Self {
            grads: model.zeros_like(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.tensor(name)
    }

    pub fn router_w(&self, layer: usize) -> &Matrix {
        &self.grads.blocks[layer].l2a.router.w
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        for ((_, a, _), (_, b, _)) in self.grads.tensors_mut().into_iter().zip(other.grads.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f32) {
        for (_, a, _) in self.grads.tensors_mut() {
            a.scale(alpha);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .tensors()
            .iter()
            .map(|(_, m, _)| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.tensors().iter().all(|(_, m, _)| m.is_finite())
    }
}

/// Per-layer quantities exposed by the backward pass.
#[derive(Clone, Debug)]
pub struct BackwardTrace {
    /// `∂L/∂o` at each layer's output (before its FFN).
    pub d_layer_out: Vec<Matrix>,
    /// `(∂L/∂o_t)ᵀ a_t` per layer.
    pub d_dhat_ntp: Vec<Vec<f32>>,
}

/// Back-propagates `d_logits` (and optional per-layer router-score
/// gradients) through the model. Frozen parameter groups get zero gradients.
pub fn model_backward(
    model: &ToyModel,
    saved: &ModelSaved,
    d_logits: &Matrix,
    d_dhat_extra: Option<&[Vec<f32>]>,
) -> Result<(ParamGrads, BackwardTrace)> {
    let n = saved.tokens.len();
    if d_logits.shape() != (n, model.config.vocab) {
        return Err(Error::StateMismatch(format!(
            "d_logits {:?}, expected {:?}",
            d_logits.shape(),
            (n, model.config.vocab)
        )));
    }
    if saved.layers.len() != model.num_layers() {
        return Err(Error::StateMismatch("layer count changed since forward".into()));
    }
    if let Some(extra) = d_dhat_extra {
        if extra.len() != model.num_layers() {
            return Err(Error::StateMismatch("one router gradient vector per layer expected".into()));
        }
    }
    let mut grads = ParamGrads::zeros(model);
    grads.grads.unembed = saved.final_hidden.t_matmul(d_logits)?;
    let mut d_h = d_logits.matmul_t(&model.unembed)?;
    let num_layers = model.num_layers();
    let mut d_layer_out = vec![Matrix::zeros(0, 0); num_layers];
    let mut d_dhat_ntp = vec![Vec::new(); num_layers];
    for l in (0..num_layers).rev() {
        let block = &model.blocks[l];
        let gblock = &mut grads.grads.blocks[l];
        let d_o = ffn_backward(&block.ffn, &saved.ffn[l], &d_h, &mut gblock.ffn)?;
        let extra = d_dhat_extra.map(|e| e[l].as_slice());
        let lb = l2a_layer_backward(&block.l2a, &saved.layers[l], &d_o, extra, saved.tiles, &mut gblock.l2a)?;
        d_layer_out[l] = d_o;
        d_dhat_ntp[l] = lb.d_dhat_ntp;
        d_h = lb.d_x;
    }
    for (r, &tok) in saved.tokens.iter().enumerate() {
        for (g, &v) in grads.grads.embed.row_mut(tok).iter_mut().zip(d_h.row(r)) {
            *g += v;
        }
    }
    let trainable = model.config.trainable;
    for (_, m, group) in grads.grads.tensors_mut() {
        if !trainable.includes(group) {
            m.fill(0.0);
        }
    }
    Ok((
        grads,
        BackwardTrace {
            d_layer_out,
            d_dhat_ntp,
        },
    ))
}
