use serde::{Deserialize, Serialize};

use crate::inference::cache::KvCache;
use crate::layer::ToyModel;

/// Stored key/value entries of one layer. An entry is one position's keys
/// and values across all heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub global_entries: usize,
    pub local_entries: usize,
    pub bytes_per_entry: usize,
}

impl LayerLedger {
    pub fn bytes(&self) -> usize {
        (self.global_entries + self.local_entries) * self.bytes_per_entry
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheLedger {
    /// Context length the ledger describes.
    pub context: usize,
    pub layers: Vec<LayerLedger>,
    pub total_global_entries: usize,
    pub total_local_entries: usize,
    pub total_bytes: usize,
}

fn bytes_per_entry(model: &ToyModel) -> usize {
    2 * model.config.head_dim() * model.config.num_heads * std::mem::size_of::<f32>()
}

impl KvCacheLedger {
    fn from_layers(context: usize, layers: Vec<LayerLedger>) -> Self {
        Self {
            context,
            total_global_entries: layers.iter().map(|l| l.global_entries).sum(),
            total_local_entries: layers.iter().map(|l| l.local_entries).sum(),
            total_bytes: layers.iter().map(LayerLedger::bytes).sum(),
            layers,
        }
    }

    /// Closed form after `context` tokens: every unpruned layer keeps all
    /// positions globally, every layer keeps `window + 1` positions locally.
    pub fn predicted(model: &ToyModel, context: usize) -> Self {
        let bpe = bytes_per_entry(model);
        let layers = model
            .layers()
            .map(|l| LayerLedger {
                global_entries: if l.is_pruned() { 0 } else { context },
                local_entries: context.min(l.window + 1),
                bytes_per_entry: bpe,
            })
            .collect();
        Self::from_layers(context, layers)
    }

    /// Direct count of what `cache` actually stores.
    pub fn from_cache(model: &ToyModel, cache: &KvCache) -> Self {
        let bpe = bytes_per_entry(model);
        let layers = cache
            .layers
            .iter()
            .map(|l| LayerLedger {
                global_entries: l.global_entries(),
                local_entries: l.local_entries(),
                bytes_per_entry: bpe,
            })
            .collect();
        Self::from_layers(cache.position, layers)
    }
}
