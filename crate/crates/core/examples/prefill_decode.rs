//! Incremental inference: prefill a prompt, decode the rest token by token,
//! and compare with one full forward. Pruned layers keep no global cache.

use l2a::inference::{prefill, prefill_then_decode, KvCacheLedger};
use l2a::kernel::TileConfig;
use l2a::layer::{model_forward, ForwardOptions, ModelConfig, ToyModel};
use l2a::numcore::{Matrix, Rng};

fn main() -> l2a::Result<()> {
    let cfg = ModelConfig { vocab: 20, d_model: 16, num_heads: 2, num_layers: 3, ffn_hidden: 32, window: 4, ..ModelConfig::default() };
    let mut rng = Rng::new(3);
    let mut model = ToyModel::new(cfg, &mut rng)?;
    for b in &mut model.blocks {
        b.l2a.router.w = Matrix::random_normal(1, 16, 0.5, &mut rng);
    }
    model.blocks[1].l2a.prune();

    let tokens: Vec<usize> = (0..48).map(|_| rng.below(20)).collect();
    let full = model_forward(&tokens, &model, &ForwardOptions::eval())?;
    let tiles = TileConfig::default();
    for prompt in [1, 16, 47] {
        let inc = prefill_then_decode(&model, &tokens, prompt, tiles)?;
        println!("prompt {prompt:>2}: max |Δlogit| {:.2e}", inc.max_abs_diff(&full.logits));
    }

    let p = prefill(&model, &tokens, None, tiles)?;
    let ledger = KvCacheLedger::from_cache(&model, &p.cache);
    for (i, l) in ledger.layers.iter().enumerate() {
        println!("layer {i}: {} global entries, {} local entries", l.global_entries, l.local_entries);
    }
    println!("matches closed form: {}", ledger == KvCacheLedger::predicted(&model, tokens.len()));
    Ok(())
}
