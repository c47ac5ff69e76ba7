//! Converts a pretrained dense model into a routed one: the dense attention
//! weights seed both the windowed local branch and the global branch, and the
//! router starts at zero so every token begins on the global path.

use l2a::layer::{model_forward, ForwardOptions, ModelConfig, RoutingOverride, ToyModel};
use l2a::numcore::Rng;
use l2a::training::{make_batch, train, TaskSpec, TrainConfig};

fn main() -> l2a::Result<()> {
    let cfg = ModelConfig { vocab: 32, d_model: 16, num_heads: 2, ffn_hidden: 32, window: 8, ..ModelConfig::default() };
    let task = TaskSpec { n: 64, vocab: 32, window: 8, num_values: 6, num_queries: 4, ..TaskSpec::default() };
    let mut rng = Rng::new(5);
    let mut dense = ToyModel::dense_base(cfg, &mut rng)?;
    let log = train(&mut dense, &task, &TrainConfig { lambda_reg: 0.0, collapse_mitigation: false, steps: 30, batch_size: 4, ..TrainConfig::default() }, |_| {})?;
    println!("dense base ntp {:.3} -> {:.3}", log[0].ntp_loss, log[log.len() - 1].ntp_loss);

    let routed = ToyModel::from_dense_base(&dense, 8)?;
    for s in make_batch(&task, 3, &rng.split(1))? {
        let b = model_forward(&s.tokens, &routed, &ForwardOptions::eval())?;
        let c = model_forward(&s.tokens, &routed, &ForwardOptions::eval().with_routing(RoutingOverride::AllOnes))?;
        let sparsity: Vec<f64> = b.traces.iter().map(|t| t.routing.as_ref().map_or(1.0, |r| r.sparsity())).collect();
        println!("sparsity {sparsity:?}, max |Δlogit| against all-global routing {:.2e}", b.logits.max_abs_diff(&c.logits));
    }
    Ok(())
}
