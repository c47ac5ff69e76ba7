//! Prefill and decode with a KV cache, storage accounting, sparsity-based
//! layer pruning and test-time threshold sweeps.

mod cache;
mod ledger;
mod prune;
mod sweep;

pub use cache::{decode_step, prefill, prefill_then_decode, DecodeLayerTrace, HeadKv, KvCache, LayerCache, Prefill};
pub use ledger::{KvCacheLedger, LayerLedger};
pub use prune::{measure_layer_sparsity, prune_layers, PruneReport, DEFAULT_PRUNE_THRESHOLD};
pub use sweep::{threshold_sweep, SweepPoint, SweepReport};
