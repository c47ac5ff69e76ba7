//! Rebuilds each router's weight gradient from per-token pieces (task-loss
//! signal on routed tokens plus the sparsity penalty) and compares it with
//! backprop.

use l2a::layer::{ModelConfig, ToyModel};
use l2a::numcore::{Matrix, Rng};
use l2a::training::{make_batch, verify_router_gradient_identity, IdentityCheck, TaskKind, TaskSpec};

fn main() -> l2a::Result<()> {
    let cfg = ModelConfig { vocab: 16, d_model: 8, num_heads: 2, ffn_hidden: 16, window: 2, ..ModelConfig::default() };
    let task = TaskSpec { kind: TaskKind::Needle, n: 24, vocab: 16, window: 2, depth: 2, num_values: 4, num_queries: 3 };
    let mut rng = Rng::new(11);
    let mut model = ToyModel::new(cfg, &mut rng)?;
    for b in &mut model.blocks {
        b.l2a.router.w = Matrix::random_normal(1, 8, 0.8, &mut rng);
    }
    let sample = &make_batch(&task, 1, &rng)?[0];
    for forced in [true, false] {
        let r = verify_router_gradient_identity(&model, sample, &IdentityCheck { forced, ..IdentityCheck::default() })?;
        for l in &r.layers {
            println!(
                "forced {forced:<5} layer {}: rel err {:.2e}, masked-token task signal {:.2e} over {} tokens",
                l.layer, l.rel_err, l.masked_ntp_mass, l.masked_tokens
            );
        }
    }
    Ok(())
}
