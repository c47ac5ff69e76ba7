//! The conditional-attention layer and the toy decoder built from it.

pub mod checkpoint;
mod forward;
pub(crate) use forward::ffn_forward;
mod params;

pub use forward::{
    l2a_layer_backward, l2a_layer_forward, model_backward, model_forward, BackwardTrace,
    ForwardOptions, LayerBackward, LayerOptions, LayerRouting, LayerSaved, LayerTrace, Mode,
    ModelForward, ModelSaved, ParamGrads, RoutingOverride, NORM_PLACEMENT,
};
pub use params::{
    DecoderBlock, FeedForward, GlobalBranch, L2ALayer, LayerNormParams, ModelConfig, ParamGroup,
    RouterInput, ToyModel, TrainableSet, FULL_CONTEXT_WINDOW,
};
