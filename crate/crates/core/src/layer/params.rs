use serde::{Deserialize, Serialize};

use crate::attn_ref::AttnParams;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng, LN_EPS};
use crate::router::RouterParams;

/// Window used for full causal attention in a dense base model; larger than
/// any sequence this crate handles.
pub const FULL_CONTEXT_WINDOW: usize = 1 << 20;

/// Where the router reads its input from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInput {
    /// `s_t = x_t + LN(SWA(x))_t`, the residual stream after local attention.
    #[default]
    Residual,
    /// `LN(SWA(x))_t` alone.
    LocalNorm,
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Attention, router and LayerNorm parameters; embeddings, FFN and the
    /// output head are frozen.
    #[default]
    TokenMixing,
    /// Everything except the FFN blocks.
    AllButFfn,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Attention,
    Router,
    LayerNorm,
    Ffn,
    Unembedding,
}

impl TrainableSet {
    pub fn includes(&self, group: ParamGroup) -> bool {
        match self {
            TrainableSet::All => true,
            TrainableSet::AllButFfn => group != ParamGroup::Ffn,
            TrainableSet::TokenMixing => matches!(
                group,
                ParamGroup::Attention | ParamGroup::Router | ParamGroup::LayerNorm
            ),
        }
    }
}

/// Shape and behaviour of a [`ToyModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    /// Local attention sees the token itself plus `window` predecessors.
    pub window: usize,
    pub threshold: f32,
    pub rope_base: f64,
    pub rope_enabled: bool,
    pub ln_eps: f32,
    pub router_input: RouterInput,
    pub trainable: TrainableSet,
    /// Scale of the frozen FFN output projection at initialization.
    pub ffn_init_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_hidden: 128,
            window: 32,
            threshold: 0.5,
            rope_base: 10_000.0,
            rope_enabled: true,
            ln_eps: LN_EPS,
            router_input: RouterInput::Residual,
            trainable: TrainableSet::TokenMixing,
            ffn_init_scale: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d_model == 0 || self.num_layers == 0 || self.ffn_hidden == 0 {
            return fail("vocab, d_model, num_layers and ffn_hidden must be positive".into());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for RoPE", self.head_dim()));
        }
        if !self.threshold.is_finite() {
            return fail("threshold must be finite".into());
        }
        if !(self.rope_base > 0.0) {
            return fail("rope_base must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub eps: f32,
}

impl LayerNormParams {
    pub fn new(d: usize, eps: f32) -> Self {
        Self {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
            eps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Matrix::zeros(1, self.gamma.cols()),
            beta: Matrix::zeros(1, self.beta.cols()),
            eps: self.eps,
        }
    }
}

/// The global-attention path of a layer; absent once pruned.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalBranch {
    pub attn: AttnParams,
    pub ln: LayerNormParams,
}

/// One conditional-attention layer: local attention, router, and an
/// optional global attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct L2ALayer {
    pub local: AttnParams,
    pub ln_local: LayerNormParams,
    pub router: RouterParams,
    pub global: Option<GlobalBranch>,
    pub window: usize,
    pub threshold: f32,
    pub router_input: RouterInput,
}

impl L2ALayer {
    pub fn is_pruned(&self) -> bool {
        self.global.is_none()
    }

    /// Drops the global branch. Local attention and its KV window remain.
    pub fn prune(&mut self) {
        self.global = None;
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            local: self.local.zeros_like(),
            ln_local: self.ln_local.zeros_like(),
            router: RouterParams::zeros(self.router.w.cols()),
            global: self.global.as_ref().map(|g| GlobalBranch {
                attn: g.attn.zeros_like(),
                ln: g.ln.zeros_like(),
            }),
            ..self.clone()
        }
    }
}

/// Two-matrix GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl FeedForward {
    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub l2a: L2ALayer,
    pub ffn: FeedForward,
}

/// Embedding → conditional-attention blocks (each followed by an FFN) →
/// output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub blocks: Vec<DecoderBlock>,
    pub unembed: Matrix,
}

macro_rules! collect_tensors {
    ($model:expr, $($r:tt)+) => {{
        let m = $model;
        let mut out = Vec::new();
        out.push(("embed".to_string(), $($r)+ m.embed, ParamGroup::Embedding));
        for (i, b) in ($($r)+ m.blocks).into_iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.local.w_q"), $($r)+ b.l2a.local.w_q, ParamGroup::Attention));
            out.push((format!("{p}.local.w_k"), $($r)+ b.l2a.local.w_k, ParamGroup::Attention));
            out.push((format!("{p}.local.w_v"), $($r)+ b.l2a.local.w_v, ParamGroup::Attention));
            out.push((format!("{p}.local.w_o"), $($r)+ b.l2a.local.w_o, ParamGroup::Attention));
            out.push((format!("{p}.ln_local.gamma"), $($r)+ b.l2a.ln_local.gamma, ParamGroup::LayerNorm));
            out.push((format!("{p}.ln_local.beta"), $($r)+ b.l2a.ln_local.beta, ParamGroup::LayerNorm));
            out.push((format!("{p}.router.w"), $($r)+ b.l2a.router.w, ParamGroup::Router));
            if let Some(g) = $($r)+ b.l2a.global {
                out.push((format!("{p}.global.w_q"), $($r)+ g.attn.w_q, ParamGroup::Attention));
                out.push((format!("{p}.global.w_k"), $($r)+ g.attn.w_k, ParamGroup::Attention));
                out.push((format!("{p}.global.w_v"), $($r)+ g.attn.w_v, ParamGroup::Attention));
                out.push((format!("{p}.global.w_o"), $($r)+ g.attn.w_o, ParamGroup::Attention));
                out.push((format!("{p}.ln_global.gamma"), $($r)+ g.ln.gamma, ParamGroup::LayerNorm));
                out.push((format!("{p}.ln_global.beta"), $($r)+ g.ln.beta, ParamGroup::LayerNorm));
            }
            out.push((format!("{p}.ffn.w1"), $($r)+ b.ffn.w1, ParamGroup::Ffn));
            out.push((format!("{p}.ffn.b1"), $($r)+ b.ffn.b1, ParamGroup::Ffn));
            out.push((format!("{p}.ffn.w2"), $($r)+ b.ffn.w2, ParamGroup::Ffn));
            out.push((format!("{p}.ffn.b2"), $($r)+ b.ffn.b2, ParamGroup::Ffn));
        }
        out.push(("unembed".to_string(), $($r)+ m.unembed, ParamGroup::Unembedding));
        out
    }};
}

impl ToyModel {
    /// Random model with zero-initialized routers. Each layer's global
    /// attention starts as a copy of its local attention, as when both are
    /// initialized from a single pretrained attention layer.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.ffn_hidden;
        let mut init = rng.split(0x1171);
        let embed = Matrix::random_normal(config.vocab, d, 1.0, &mut init);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let local = AttnParams::random(d, config.num_heads, config.rope_base, config.rope_enabled, &mut init)?;
            let global = GlobalBranch {
                attn: local.clone(),
                ln: LayerNormParams::new(d, config.ln_eps),
            };
            let ffn = FeedForward {
                w1: Matrix::random_normal(d, h, 1.0 / (d as f32).sqrt(), &mut init),
                b1: Matrix::zeros(1, h),
                w2: Matrix::random_normal(h, d, config.ffn_init_scale / (h as f32).sqrt(), &mut init),
                b2: Matrix::zeros(1, d),
            };
            blocks.push(DecoderBlock {
                l2a: L2ALayer {
                    local,
                    ln_local: LayerNormParams::new(d, config.ln_eps),
                    router: RouterParams::zeros(d),
                    global: Some(global),
                    window: config.window,
                    threshold: config.threshold,
                    router_input: config.router_input,
                },
                ffn,
            });
        }
        let unembed = Matrix::random_normal(d, config.vocab, 1.0 / (d as f32).sqrt(), &mut init);
        Ok(Self {
            config,
            embed,
            blocks,
            unembed,
        })
    }

    /// A standard dense decoder: one full-context attention per layer and
    /// no router. This is the starting point for [`ToyModel::from_dense_base`].
    pub fn dense_base(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let config = ModelConfig {
            window: FULL_CONTEXT_WINDOW,
            ..config
        };
        let mut model = Self::new(config, rng)?;
        for b in &mut model.blocks {
            b.l2a.prune();
        }
        Ok(model)
    }

    /// Converts a dense model into a conditional-attention model: each
    /// layer's attention and its norm are copied into both the local branch
    /// (now limited to `window`) and the global branch, and the router starts
    /// at zero so every token still uses global attention.
    pub fn from_dense_base(base: &ToyModel, window: usize) -> Result<Self> {
        if base.blocks.iter().any(|b| !b.l2a.is_pruned()) {
            return Err(Error::Config("dense base must not have global branches".into()));
        }
        let mut model = base.clone();
        model.config.window = window;
        for b in &mut model.blocks {
            let l = &mut b.l2a;
            l.global = Some(GlobalBranch {
                attn: l.local.clone(),
                ln: l.ln_local.clone(),
            });
            l.router = RouterParams::zeros(l.router.w.cols());
            l.window = window;
        }
        model.config.validate()?;
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn layers(&self) -> impl Iterator<Item = &L2ALayer> {
        self.blocks.iter().map(|b| &b.l2a)
    }

    pub fn pruned_layers(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.l2a.is_pruned().then_some(i))
            .collect()
    }

    /// Every parameter tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix, ParamGroup)> {
        collect_tensors!(self, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix, ParamGroup)> {
        collect_tensors!(self, &mut)
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors()
            .into_iter()
            .find_map(|(n, m, _)| (n == name).then_some(m))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m, _)| m.data().len()).sum()
    }

    /// Same structure with every tensor zeroed; used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
            blocks: self
                .blocks
                .iter()
                .map(|b| DecoderBlock {
                    l2a: b.l2a.zeros_like(),
                    ffn: b.ffn.zeros_like(),
                })
                .collect(),
            unembed: Matrix::zeros(self.unembed.rows(), self.unembed.cols()),
        }
    }

    /// Overrides every layer's routing threshold.
    pub fn set_threshold(&mut self, threshold: f32) {
        for b in &mut self.blocks {
            b.l2a.threshold = threshold;
        }
        self.config.threshold = threshold;
    }
}
