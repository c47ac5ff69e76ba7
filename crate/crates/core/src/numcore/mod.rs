//! Deterministic numerics: matrices, softmax, layer norm, rotary embeddings,
//! a seeded RNG, and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod ops;
mod parallel;
mod rng;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::Matrix;
pub use ops::{
    apply_rope, apply_rope_inverse, gelu, gelu_grad, layer_norm, layer_norm_backward, positions,
    row_softmax, sigmoid, LayerNormCache, RopeConfig,
};
pub use parallel::map_in_order;
pub use rng::Rng;

/// Default LayerNorm epsilon.
pub const LN_EPS: f32 = 1e-5;
