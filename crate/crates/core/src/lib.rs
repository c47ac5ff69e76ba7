//! Conditional local/global attention.
//!
//! Each layer runs sliding-window attention for every token and lets a
//! learned per-token router decide which tokens also get exact global
//! attention. The global path uses a compacted-query tiled kernel so skipped
//! tokens cost nothing, and layers whose router almost never fires can be
//! pruned after training.

pub mod attn_ref;
pub mod bench;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod kernel;
pub mod layer;
pub mod numcore;
pub mod router;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
